//! Band trajectories of single runs under Lai and Bayes, written as CSV.
//!
//! ```text
//! cargo run -p multiwave --example trajectories > bands.csv
//! ```

use multiwave::cohort::ScenarioConfig;
use multiwave::engine::StoppingRule;
use multiwave::intervals::IntervalMethod;
use multiwave::sampling::Strategy;
use multiwave::simharness::{emit_trajectory, ExperimentSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ExperimentSpec::new(
        ScenarioConfig::nonlinked(6936, 0.78, 1),
        StoppingRule::thresholds(0.75, 0.75),
    );
    spec.seed = 11;
    println!("method,wave,k,point,lower,upper,status");
    for method in [IntervalMethod::Lai, IntervalMethod::Bayes] {
        let t = emit_trajectory(&spec, Strategy::Random, method, 0)?;
        for p in &t.points {
            println!(
                "{},{},{},{:.4},{:.4},{:.4},{}",
                method.name(),
                p.wave,
                p.k,
                p.point,
                p.lower,
                p.upper,
                p.status.name()
            );
        }
        eprintln!(
            "{}: {:?} after {} waves",
            method.name(),
            t.stop.status,
            t.points.len()
        );
    }
    Ok(())
}
