//! How the four sampling strategies spread a batch over strata.
//!
//! Runs three waves of each strategy on a left-skewed cohort whose PPV varies
//! by stratum and prints the per-stratum counts of every wave. On 0/1 labels
//! the default mad estimator is usually 0 in every stratum, so Neyman falls
//! back to proportional allocation; the last block repeats it with the sample
//! sd instead.
//!
//! ```text
//! cargo run -p multiwave --example allocation_strategies
//! ```

use multiwave::cohort::{gen_cohort, gen_labels, ScenarioConfig, Skew, StratumSpec};
use multiwave::engine::{SessionConfig, SessionState, StoppingRule};
use multiwave::intervals::IntervalMethod;
use multiwave::sampling::{SamplingPolicy, SdEstimator, Strategy};
use multiwave::simharness::oracle_records;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = ScenarioConfig {
        linkage_sd: 0.15,
        skew: Skew::Left,
        ..ScenarioConfig::nonlinked(5000, 0.7, 21)
    };
    let cohort = gen_cohort(&scenario, &StratumSpec::frailty())?;
    let truth = gen_labels(&cohort, &scenario, 22)?;
    println!("stratum sizes      {:?}", cohort.stratum_sizes());
    let probs: Vec<String> = truth
        .stratum_probabilities
        .iter()
        .map(|p| format!("{p:.2}"))
        .collect();
    println!("stratum PPVs       [{}]\n", probs.join(", "));

    let mut policies: Vec<SamplingPolicy> = Strategy::ALL
        .iter()
        .map(|&s| SamplingPolicy::new(s, 100))
        .collect();
    let mut neyman_sd = SamplingPolicy::new(Strategy::Neyman, 100);
    neyman_sd.sd_estimator = SdEstimator::SampleSd;
    policies.push(neyman_sd);

    for policy in policies {
        let label = match (policy.strategy, policy.sd_estimator) {
            (Strategy::Neyman, SdEstimator::SampleSd) => "neyman/sd".to_string(),
            (s, _) => s.name().to_string(),
        };
        let config =
            SessionConfig::new(policy, StoppingRule::width(0.01), IntervalMethod::Lai).with_seed(5);
        let mut session = SessionState::create(config, cohort.clone())?;
        for _ in 0..3 {
            let alloc = session.next_allocation()?.allocation.clone();
            let records = oracle_records(&session, &truth.labels);
            let band = *session.record_wave(&records)?.interval.as_ref().unwrap();
            println!(
                "{:<12} wave {}  {:<22} ppv {:.3} [{:.3}, {:.3}]  {:?}",
                label,
                session.wave(),
                format!("{:?}", alloc.counts),
                band.point,
                band.lower,
                band.upper,
                alloc.provenance
            );
        }
        println!();
    }
    Ok(())
}
