use multiwave::cohort::{gen_cohort, gen_labels, Cohort, ScenarioConfig, StratumSpec};
use multiwave::engine::{
    run_to_completion, EngineError, ReviewRecord, SessionConfig, SessionState, StopStatus,
    StoppingRule, SESSION_SCHEMA_VERSION,
};
use multiwave::intervals::{bayes_interval, IntervalMethod};
use multiwave::sampling::{SamplingPolicy, Strategy};
use multiwave::simharness::oracle_records;

fn cohort(n: usize, ppv: f64, sd: f64) -> (Cohort, Vec<bool>) {
    let scenario = ScenarioConfig {
        linkage_sd: sd,
        ..ScenarioConfig::nonlinked(n, ppv, 11)
    };
    let c = gen_cohort(&scenario, &StratumSpec::frailty()).unwrap();
    let truth = gen_labels(&c, &scenario, 12).unwrap().labels;
    (c, truth)
}

fn config(strategy: Strategy, method: IntervalMethod, rule: StoppingRule) -> SessionConfig {
    SessionConfig::new(SamplingPolicy::new(strategy, 100), rule, method).with_seed(5)
}

fn step(s: &mut SessionState, truth: &[bool]) {
    s.next_allocation().unwrap();
    let r = oracle_records(s, truth);
    s.record_wave(&r).unwrap();
}

#[test]
fn stratified1_wave_one_is_twenty_per_stratum() {
    let (c, _) = cohort(3000, 0.8, 0.0);
    let mut s = SessionState::create(
        config(
            Strategy::Stratified1,
            IntervalMethod::Lai,
            StoppingRule::thresholds(0.75, 0.75),
        ),
        c,
    )
    .unwrap();
    assert_eq!(s.next_allocation().unwrap().allocation.counts, vec![20; 5]);
}

#[test]
fn tallies_match_the_wave_log() {
    let (c, truth) = cohort(3000, 0.7, 0.1);
    let sizes = c.stratum_sizes();
    let mut s = SessionState::create(
        config(
            Strategy::Neyman,
            IntervalMethod::Lai,
            StoppingRule::width(0.01),
        ),
        c,
    )
    .unwrap();
    for _ in 0..6 {
        step(&mut s, &truth);
        let k: usize = s.waves.iter().map(|w| w.records.len()).sum();
        let pos: usize = s
            .waves
            .iter()
            .flat_map(|w| &w.records)
            .filter(|r| r.label)
            .count();
        assert_eq!(s.tallies.k, k);
        assert_eq!(s.tallies.s, pos);
        assert_eq!(s.bands.len(), s.wave());
        for (done, size) in s.tallies.reviewed_per_stratum.iter().zip(&sizes) {
            assert!(done <= size);
        }
        assert!((s.weights.iter().sum::<f64>() / s.weights.len() as f64 - 1.0).abs() < 1e-9);
    }
}

#[test]
fn unit_weights_reduce_to_raw_bayes() {
    // One stratum: raking never has anything to correct.
    let spec = StratumSpec::new(vec![0.0, 1.0], None).unwrap();
    let ids = (0..800).map(|i| format!("u{i}")).collect();
    let c = Cohort::from_covariates(ids, &vec![0.5; 800], spec).unwrap();
    let truth: Vec<bool> = (0..800).map(|i| i % 5 != 0).collect();
    let mut s = SessionState::create(
        config(
            Strategy::Random,
            IntervalMethod::Bayes,
            StoppingRule::width(0.001),
        ),
        c,
    )
    .unwrap();
    for _ in 0..5 {
        step(&mut s, &truth);
        let direct = bayes_interval(s.tallies.k as f64, s.tallies.s as f64, 0.05).unwrap();
        assert_eq!(*s.latest_band().unwrap(), direct);
    }
}

#[test]
fn status_is_monotone() {
    let (c, truth) = cohort(2000, 0.4, 0.0);
    let mut s = SessionState::create(
        config(
            Strategy::Random,
            IntervalMethod::Lai,
            StoppingRule::thresholds(0.75, 0.75),
        ),
        c,
    )
    .unwrap();
    let d = run_to_completion(&mut s, &truth).unwrap();
    assert_eq!(d.status, StopStatus::StopFutility);
    assert_eq!(d.wave, 1);
    assert!(d.interval.unwrap().upper < 0.75);
    let before = s.clone();
    assert!(matches!(
        s.next_allocation(),
        Err(EngineError::Stopped(StopStatus::StopFutility))
    ));
    assert!(s.record_wave(&[ReviewRecord::new("P00001", true)]).is_err());
    assert_eq!(s, before);
}

#[test]
fn exhaustion_without_stopping() {
    let (c, truth) = cohort(450, 0.75, 0.0);
    let mut s = SessionState::create(
        config(
            Strategy::Random,
            IntervalMethod::Lai,
            StoppingRule::thresholds(0.75, 0.75),
        ),
        c,
    )
    .unwrap();
    let d = run_to_completion(&mut s, &truth).unwrap();
    assert_eq!(d.status, StopStatus::Exhausted);
    assert_eq!(s.tallies.k, 450);
    assert_eq!(s.wave(), 5);
    assert_eq!(s.waves.last().unwrap().records.len(), 50);
}

#[test]
fn terminal_decision_matches_its_interval() {
    let (c, truth) = cohort(4000, 0.8, 0.05);
    for strategy in Strategy::ALL {
        for method in [IntervalMethod::Lai, IntervalMethod::Bayes] {
            let rule = StoppingRule::thresholds(0.75, 0.75);
            let mut s = SessionState::create(config(strategy, method, rule), c.clone()).unwrap();
            let d = run_to_completion(&mut s, &truth).unwrap();
            let b = d.interval.unwrap();
            match d.status {
                StopStatus::StopAbove => assert!(b.lower > 0.75),
                StopStatus::StopFutility => assert!(b.upper < 0.75),
                StopStatus::Exhausted => assert_eq!(s.reservoir.total(), 0),
                other => panic!("{other:?}"),
            }
            assert_eq!(d.wave, s.wave());
        }
    }
}

#[test]
fn truncated_file_fails_and_original_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (c, truth) = cohort(1500, 0.8, 0.0);
    let mut s = SessionState::create(
        config(
            Strategy::Random,
            IntervalMethod::Bayes,
            StoppingRule::width(0.01),
        ),
        c,
    )
    .unwrap();
    step(&mut s, &truth);
    let good = dir.path().join("good.json");
    s.save(&good).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(SessionState::load(&cut).is_err());
    assert_eq!(std::fs::read(&good).unwrap(), bytes);
    assert_eq!(SessionState::load(&good).unwrap(), s);
    // No temp file is left behind by a successful save.
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn tampered_tallies_are_rejected() {
    let (c, truth) = cohort(1500, 0.8, 0.0);
    let mut s = SessionState::create(
        config(
            Strategy::Random,
            IntervalMethod::Bayes,
            StoppingRule::width(0.01),
        ),
        c,
    )
    .unwrap();
    step(&mut s, &truth);
    let mut v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
    v["tallies"]["k"] = serde_json::json!(99);
    let text = serde_json::to_string(&v).unwrap();
    assert!(matches!(
        SessionState::from_json(&text),
        Err(EngineError::Corrupt(_))
    ));
    v["tallies"]["k"] = serde_json::json!(100);
    v["schema_version"] = serde_json::json!(SESSION_SCHEMA_VERSION + 1);
    assert!(matches!(
        SessionState::from_json(&serde_json::to_string(&v).unwrap()),
        Err(EngineError::Version { .. })
    ));
}

#[test]
fn replay_of_the_wave_log_reproduces_every_band() {
    let (c, truth) = cohort(3000, 0.78, 0.1);
    let cfg = config(
        Strategy::Neyman,
        IntervalMethod::Lai,
        StoppingRule::width(0.04),
    );
    let mut s = SessionState::create(cfg.clone(), c.clone()).unwrap();
    run_to_completion(&mut s, &truth).unwrap();
    let replayed = SessionState::replay(cfg, c, &s.waves).unwrap();
    assert_eq!(replayed.bands, s.bands);
    assert_eq!(replayed.status, s.status);
}

#[test]
fn replay_detects_a_foreign_log() {
    let (c, truth) = cohort(3000, 0.78, 0.1);
    let cfg = config(
        Strategy::Random,
        IntervalMethod::Lai,
        StoppingRule::width(0.04),
    );
    let mut s = SessionState::create(cfg.clone(), c.clone()).unwrap();
    step(&mut s, &truth);
    step(&mut s, &truth);
    let other = cfg.with_seed(6);
    assert!(SessionState::replay(other, c, &s.waves).is_err());
}

#[test]
fn views_carry_the_wave_index() {
    let (c, truth) = cohort(2000, 0.8, 0.0);
    let mut s = SessionState::create(
        config(
            Strategy::Stratified2,
            IntervalMethod::Bayes,
            StoppingRule::width(0.01),
        ),
        c,
    )
    .unwrap();
    assert!(s.allocation_view().is_none());
    s.next_allocation().unwrap();
    let a = s.allocation_view().unwrap();
    assert_eq!((a.wave, a.allocation.wave), (0, 1));
    assert_eq!(a.patients.len(), 100);
    assert_eq!(s.status_view().pending_wave, Some(1));
    let r = oracle_records(&s, &truth);
    s.record_wave(&r).unwrap();
    step(&mut s, &truth);
    let h = s.history_view();
    assert_eq!(h.wave, 2);
    assert_eq!(h.entries.len(), 2);
    assert_eq!(h.entries[1].k, 200);
    assert_eq!(h.entries[1].interval, s.bands[1]);
    assert_eq!(s.status_view().pending_wave, None);
}
