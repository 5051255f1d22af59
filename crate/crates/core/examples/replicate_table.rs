//! Run an experiment file and print its summary table.
//!
//! ```text
//! cargo run -p multiwave --release --example replicate_table -- experiments/efficacy_ppv080.toml
//! ```

use multiwave::simharness::{run_replications, ExperimentSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "experiments/efficacy_ppv080.toml".into());
    let spec = ExperimentSpec::load(&path)?;
    println!(
        "{}: n={} ppv={} linkage_sd={} reps={}\n",
        spec.name, spec.scenario.n, spec.scenario.ppv, spec.scenario.linkage_sd, spec.repetitions
    );
    println!("strategy     method  stopped  futility  batches  95% CI");
    for r in run_replications(&spec)? {
        let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.2}"));
        println!(
            "{:<12} {:<6} {:>8.2} {:>9.2} {:>8}  ({}, {})",
            r.strategy.name(),
            r.method.name(),
            r.prop_stopped,
            r.prop_futility,
            f(r.mean_batches),
            f(r.batch_ci_low),
            f(r.batch_ci_high)
        );
    }
    Ok(())
}
