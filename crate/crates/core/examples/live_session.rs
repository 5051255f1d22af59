//! A review session driven wave by wave, as a coordinator would: request an
//! allocation, collect labels, record them, save the file, resume later.
//!
//! ```text
//! cargo run -p multiwave --example live_session
//! ```

use multiwave::cohort::{gen_cohort, gen_labels, ScenarioConfig, StratumSpec};
use multiwave::engine::{ReviewRecord, SessionConfig, SessionState, StopStatus, StoppingRule};
use multiwave::intervals::IntervalMethod;
use multiwave::sampling::{SamplingPolicy, Strategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = ScenarioConfig {
        linkage_sd: 0.1,
        ..ScenarioConfig::nonlinked(6936, 0.8, 3)
    };
    let cohort = gen_cohort(&scenario, &StratumSpec::frailty())?;
    // Stand-in for the reviewers: the hidden reference labels.
    let truth = gen_labels(&cohort, &scenario, 4)?.labels;

    let config = SessionConfig::new(
        SamplingPolicy::new(Strategy::Neyman, 100),
        StoppingRule::thresholds(0.75, 0.75),
        IntervalMethod::Lai,
    )
    .with_seed(2024);
    let dir = std::env::temp_dir().join("multiwave-live-session");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("session.json");
    SessionState::create(config, cohort)?.save(&path)?;

    loop {
        // Each wave starts from the file, as a fresh process would.
        let mut session = SessionState::load(&path)?;
        let pending = session.next_allocation()?;
        let records: Vec<ReviewRecord> = pending
            .rows()
            .iter()
            .zip(&pending.patient_ids)
            .map(|(&row, id)| ReviewRecord::new(id.clone(), truth[row]))
            .collect();
        let decision = session.record_wave(&records)?.clone();
        session.save(&path)?;

        let band = decision.interval.unwrap();
        println!(
            "wave {:>2}  k {:>4}  ppv {:.3}  [{:.3}, {:.3}]  {:?}",
            decision.wave, session.tallies.k, band.point, band.lower, band.upper, decision.status
        );
        if decision.status != StopStatus::Continue {
            break;
        }
    }
    println!("\nsession file: {}", path.display());
    Ok(())
}
