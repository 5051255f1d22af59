//! Raking a stratum-imbalanced sample back to the cohort margins.
//!
//! ```text
//! cargo run -p multiwave --example raking
//! ```

use multiwave::raking::{
    effective_counts, raking_weights, sample_margins, weighted_margins, weighted_ppv, RakingConfig,
    RakingFactor,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Cohort shares of five strata, and a sample that over-represents the last.
    let population = vec![0.30, 0.25, 0.20, 0.15, 0.10];
    let per_stratum = [20usize, 20, 20, 20, 40];
    let hit_rate = [0.9, 0.85, 0.8, 0.7, 0.5];

    let mut categories = Vec::new();
    let mut labels = Vec::new();
    for (s, (&n, &p)) in per_stratum.iter().zip(&hit_rate).enumerate() {
        let hits = (n as f64 * p).round() as usize;
        for i in 0..n {
            categories.push(s);
            labels.push(i < hits);
        }
    }

    let factor = RakingFactor {
        categories: categories.clone(),
        population: population.clone(),
    };
    let out = raking_weights(&[factor], &RakingConfig::default())?;
    let unit = vec![1.0; labels.len()];

    println!("population  {population:?}");
    println!("sample      {:.3?}", sample_margins(&categories, 5));
    println!(
        "raked       {:.3?}",
        weighted_margins(&categories, &out.weights, 5)
    );
    println!(
        "iterations {}, converged {}, max weight {:.3}",
        out.iterations,
        out.converged,
        out.weights.iter().cloned().fold(0.0, f64::max)
    );
    let (k, s) = effective_counts(&labels, &out.weights)?;
    println!(
        "\nraw ppv {:.3}  raked ppv {:.3}  effective n {k:.1} (s {s:.1}) of {}",
        weighted_ppv(&labels, &unit)?,
        weighted_ppv(&labels, &out.weights)?,
        labels.len()
    );
    Ok(())
}
