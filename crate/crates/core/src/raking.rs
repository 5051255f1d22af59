//! Raking (iterative proportional fitting) of the reviewed sample towards the
//! cohort's risk-factor distribution, the weighted PPV, and the Kish
//! effective-count bridge into the binomial interval constructions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RakingError {
    #[error("empty sample")]
    Empty,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("factor {factor}: {reason}")]
    BadMargin { factor: usize, reason: String },
    #[error("factor {factor}, category {category}: population share {population} but no sampled patients")]
    UncorrectableMargin {
        factor: usize,
        category: usize,
        population: f64,
    },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid raking config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct RakingConfig {
    /// A factor is raked only if some category's sample share is further than
    /// this from its population share.
    pub discrepancy_threshold: f64,
    pub weight_cap: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for RakingConfig {
    fn default() -> Self {
        Self {
            discrepancy_threshold: 0.05,
            weight_cap: 5.0,
            max_iterations: 50,
            tolerance: 1e-6,
        }
    }
}

impl RakingConfig {
    pub fn validate(&self) -> Result<(), RakingError> {
        let bad = |m: &str| Err(RakingError::InvalidConfig(m.into()));
        if !(self.discrepancy_threshold >= 0.0) {
            return bad("discrepancy_threshold must be >= 0");
        }
        if !(self.weight_cap > 1.0) {
            return bad("weight_cap must exceed 1");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        Ok(())
    }
}

/// One raking dimension: each sampled patient's category and the population
/// distribution over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct RakingFactor {
    pub categories: Vec<usize>,
    pub population: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RakingOutcome {
    pub weights: Vec<f64>,
    /// Indices of the factors that exceeded the discrepancy threshold.
    pub raked_factors: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted share of each category.
pub fn weighted_margins(categories: &[usize], weights: &[f64], n_categories: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_categories];
    for (&c, &w) in categories.iter().zip(weights) {
        out[c] += w;
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    out
}

pub fn sample_margins(categories: &[usize], n_categories: usize) -> Vec<f64> {
    weighted_margins(categories, &vec![1.0; categories.len()], n_categories)
}

fn max_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_factor(idx: usize, f: &RakingFactor, n: usize) -> Result<(), RakingError> {
    let bad = |reason: String| RakingError::BadMargin {
        factor: idx,
        reason,
    };
    if f.categories.len() != n {
        return Err(RakingError::LengthMismatch(format!(
            "factor {idx} has {} patients, expected {n}",
            f.categories.len()
        )));
    }
    if f.population.is_empty() {
        return Err(bad("no categories".into()));
    }
    if f.population.iter().any(|p| !(*p >= 0.0)) {
        return Err(bad("negative population share".into()));
    }
    let total: f64 = f.population.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(bad(format!("population shares sum to {total}")));
    }
    if let Some(&c) = f.categories.iter().find(|&&c| c >= f.population.len()) {
        return Err(bad(format!("category {c} out of range")));
    }
    Ok(())
}

fn normalise_mean_one(w: &mut [f64]) {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if mean > 0.0 {
        for x in w.iter_mut() {
            *x /= mean;
        }
    }
}

/// Mean 1 with no weight above `cap` (`cap >= 1`): capped weights sit at
/// the cap and the rest share the remaining mass in proportion.
fn cap_mean_one(w: &mut [f64], cap: f64) {
    normalise_mean_one(w);
    let n = w.len() as f64;
    for _ in 0..w.len() {
        if w.iter().all(|&x| x <= cap) {
            return;
        }
        let capped = w.iter().filter(|&&x| x >= cap).count() as f64;
        let free: f64 = w.iter().filter(|&&x| x < cap).sum();
        let scale = (n - capped * cap) / free;
        for x in w.iter_mut() {
            *x = if *x >= cap { cap } else { *x * scale };
        }
    }
}

/// Per-patient raking weights, normalised to mean 1.
pub fn raking_weights(
    factors: &[RakingFactor],
    cfg: &RakingConfig,
) -> Result<RakingOutcome, RakingError> {
    cfg.validate()?;
    let n = factors.first().map_or(0, |f| f.categories.len());
    if n == 0 {
        return Err(RakingError::Empty);
    }
    for (i, f) in factors.iter().enumerate() {
        check_factor(i, f, n)?;
    }

    let active: Vec<usize> = factors
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            let sample = sample_margins(&f.categories, f.population.len());
            max_discrepancy(&sample, &f.population) > cfg.discrepancy_threshold
        })
        .map(|(i, _)| i)
        .collect();
    let mut weights = vec![1.0; n];
    if active.is_empty() {
        return Ok(RakingOutcome {
            weights,
            raked_factors: active,
            iterations: 0,
            converged: true,
        });
    }

    for &fi in &active {
        let f = &factors[fi];
        let counts = sample_margins(&f.categories, f.population.len());
        for (c, (&share, &pop)) in counts.iter().zip(&f.population).enumerate() {
            if (share == 0.0) != (pop == 0.0) {
                return Err(RakingError::UncorrectableMargin {
                    factor: fi,
                    category: c,
                    population: pop,
                });
            }
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        for &fi in &active {
            let f = &factors[fi];
            let margins = weighted_margins(&f.categories, &weights, f.population.len());
            for (w, &c) in weights.iter_mut().zip(&f.categories) {
                *w *= f.population[c] / margins[c];
            }
        }
        cap_mean_one(&mut weights, cfg.weight_cap);
        let worst = active
            .iter()
            .map(|&fi| {
                let f = &factors[fi];
                let m = weighted_margins(&f.categories, &weights, f.population.len());
                max_discrepancy(&m, &f.population)
            })
            .fold(0.0, f64::max);
        if worst < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(RakingOutcome {
        weights,
        raked_factors: active,
        iterations,
        converged,
    })
}

fn check_weighted(labels: &[bool], weights: &[f64]) -> Result<(), RakingError> {
    if labels.is_empty() {
        return Err(RakingError::Empty);
    }
    if labels.len() != weights.len() {
        return Err(RakingError::LengthMismatch(format!(
            "{} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(RakingError::InvalidWeights(
            "weights must be positive and finite".into(),
        ));
    }
    Ok(())
}

/// `Σ w_i y_i / Σ w_i`.
pub fn weighted_ppv(labels: &[bool], weights: &[f64]) -> Result<f64, RakingError> {
    check_weighted(labels, weights)?;
    let total: f64 = weights.iter().sum();
    let hits: f64 = labels
        .iter()
        .zip(weights)
        .filter(|(&y, _)| y)
        .map(|(_, w)| w)
        .sum();
    Ok((hits / total).clamp(0.0, 1.0))
}

/// Kish effective size `(Σw)²/Σw²` and the matching effective successes.
pub fn effective_counts(labels: &[bool], weights: &[f64]) -> Result<(f64, f64), RakingError> {
    let ppv = weighted_ppv(labels, weights)?;
    if weights.iter().all(|&w| w == weights[0]) {
        // Equal weights: the raw tallies, exactly.
        let hits = labels.iter().filter(|&&y| y).count();
        return Ok((labels.len() as f64, hits as f64));
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let k = (sum * sum / sum_sq).min(labels.len() as f64);
    Ok((k, (ppv * k).clamp(0.0, k)))
}

/// Weights plus the effective counts derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub weights: Vec<f64>,
    pub k_eff: f64,
    pub s_eff: f64,
}

impl WeightedSample {
    pub fn new(labels: &[bool], weights: Vec<f64>) -> Result<Self, RakingError> {
        let (k_eff, s_eff) = effective_counts(labels, &weights)?;
        Ok(Self {
            weights,
            k_eff,
            s_eff,
        })
    }
}
