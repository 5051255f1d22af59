//! How many more batches until the rule fires? Simulation and rate forecasts
//! at each wave of a session, next to what actually happened.
//!
//! ```text
//! cargo run -p multiwave --example forecast
//! ```

use multiwave::cohort::{gen_cohort, gen_labels, ScenarioConfig, StratumSpec};
use multiwave::engine::{SessionConfig, SessionState, StoppingRule};
use multiwave::forecast::{predict_session_rate, predict_stopping_sim};
use multiwave::intervals::IntervalMethod;
use multiwave::sampling::{SamplingPolicy, Strategy};
use multiwave::simharness::oracle_records;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = ScenarioConfig {
        linkage_sd: 0.05,
        ..ScenarioConfig::nonlinked(6936, 0.225, 1)
    };
    let cohort = gen_cohort(&scenario, &StratumSpec::frailty())?;
    let truth = gen_labels(&cohort, &scenario, 2)?.labels;
    let config = SessionConfig::new(
        SamplingPolicy::new(Strategy::Neyman, 100),
        StoppingRule::thresholds(0.20, 0.25),
        IntervalMethod::Lai,
    )
    .with_seed(3);
    let mut session = SessionState::create(config, cohort)?;

    let mut forecasts = Vec::new();
    while !session.is_terminal() {
        session.next_allocation()?;
        let records = oracle_records(&session, &truth);
        session.record_wave(&records)?;
        if session.is_terminal() {
            break;
        }
        let sim = predict_stopping_sim(&session, 200, 7, 500)?;
        let rate = predict_session_rate(&session, 500)?;
        forecasts.push((session.wave(), sim, rate));
    }

    let stop = session.wave();
    println!("stopped at wave {stop} ({:?})\n", session.status.status);
    println!("wave  actual  simulated (95% band)   rate");
    for (wave, sim, rate) in forecasts {
        println!(
            "{wave:>4}  {:>6}  {:>6.1} ({:>4.0}, {:>4.0})    {:>5.0}",
            stop - wave,
            sim.remaining_batches_point,
            sim.band.0,
            sim.band.1,
            rate.remaining_batches_point
        );
    }
    Ok(())
}
