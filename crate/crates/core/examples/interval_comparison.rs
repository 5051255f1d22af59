//! Lai's confidence sequence against the Beta credible interval, plus the
//! alpha-spending normal interval on the same 0/1 data.
//!
//! ```text
//! cargo run -p multiwave --example interval_comparison
//! ```

use multiwave::intervals::{bayes_interval, lai_interval, normal_interval, AlphaSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schedule = AlphaSchedule::geometric(0.05)?;
    println!(
        "{:>5} {:>5}   {:>17}   {:>17}   {:>17}",
        "k", "s", "lai", "bayes", "normal"
    );
    for (wave, k) in [20u32, 50, 100, 200, 500, 1000, 2000]
        .into_iter()
        .enumerate()
    {
        let s = (0.8 * f64::from(k)).round();
        let k = f64::from(k);
        let lai = lai_interval(k, s, 0.05)?;
        let bayes = bayes_interval(k, s, 0.05)?;
        let values: Vec<f64> = (0..k as usize)
            .map(|i| if (i as f64) < s { 1.0 } else { 0.0 })
            .collect();
        let normal = normal_interval(&values, wave as u32, &schedule)?;
        println!(
            "{k:>5} {s:>5}   [{:.3}, {:.3}] {:.3}   [{:.3}, {:.3}] {:.3}   [{:.3}, {:.3}] {:.3}",
            lai.lower,
            lai.upper,
            lai.width(),
            bayes.lower,
            bayes.upper,
            bayes.width(),
            normal.lower,
            normal.upper,
            normal.width()
        );
    }
    println!("\nLai stays valid under continuous monitoring, so it pays with width.");
    Ok(())
}
