//! How many more waves until the session stops.
//!
//! Two predictors. The simulation predictor continues the session with
//! synthetic Bernoulli(p̂) batches and counts batches to stop; the rate
//! predictor assumes the band width shrinks like `n^{-1/2}`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{evaluate_stopping, SessionState, StopMode, StoppingRule};
use crate::intervals::{binomial_interval, IntervalError, IntervalEstimate};
use crate::rng::{rng_for, tag};

pub const DEFAULT_REPLICATIONS: usize = 200;
pub const DEFAULT_HORIZON: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("invalid forecast input: {0}")]
    InvalidInput(String),
    #[error("session has no completed wave to extrapolate from")]
    NoData,
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMethod {
    Simulate,
    Rate,
}

impl std::str::FromStr for ForecastMethod {
    type Err = ForecastError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simulate" | "sim" => Ok(Self::Simulate),
            "rate" => Ok(Self::Rate),
            other => Err(ForecastError::InvalidInput(format!(
                "unknown forecast method {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Completed waves when the forecast was made.
    pub wave: usize,
    pub remaining_batches_point: f64,
    pub band: (f64, f64),
    pub replications: usize,
    pub method: ForecastMethod,
    /// Replications that hit the horizon without stopping.
    pub cap_hits: usize,
    pub horizon: usize,
}

impl ForecastResult {
    fn settled(wave: usize, method: ForecastMethod, horizon: usize) -> Self {
        Self {
            wave,
            remaining_batches_point: 0.0,
            band: (0.0, 0.0),
            replications: 0,
            method,
            cap_hits: 0,
            horizon,
        }
    }
}

/// Empirical quantile (inverse of the step CDF) of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// One synthetic continuation: batches until the rule fires, the reservoir
/// runs dry or the horizon is reached. Returns `(batches, hit_cap)`.
fn continue_once<R: Rng>(
    rng: &mut R,
    session: &SessionState,
    start: &IntervalEstimate,
    p_hat: f64,
    horizon: usize,
) -> Result<(usize, bool), ForecastError> {
    let cfg = &session.config;
    let batch = cfg.policy.batch_size;
    let mut k = start.k_eff;
    let mut s = start.s_eff;
    let mut left = session.reservoir.total();
    let mut prev = *start;
    for t in 1..=horizon {
        let n = batch.min(left);
        if n == 0 {
            return Ok((t - 1, false));
        }
        left -= n;
        let hits = (0..n).filter(|_| rng.random_bool(p_hat)).count();
        k += n as f64;
        s += hits as f64;
        let mut band = binomial_interval(cfg.method, k, s, cfg.alpha)?;
        if cfg.intersect_bands {
            let (lo, hi) = (band.lower.max(prev.lower), band.upper.min(prev.upper));
            if lo <= hi {
                band.lower = lo;
                band.upper = hi;
            }
        }
        prev = band;
        if evaluate_stopping(&band, &cfg.rule).status.is_terminal() || left == 0 {
            return Ok((t, false));
        }
    }
    Ok((horizon, true))
}

/// Simulation forecast with `replications` independent continuations.
///
/// Continuations use unit weights starting from the session's current
/// effective counts, and draw labels at the current weighted point estimate.
pub fn predict_stopping_sim(
    session: &SessionState,
    replications: usize,
    seed: u64,
    horizon: usize,
) -> Result<ForecastResult, ForecastError> {
    if replications == 0 || horizon == 0 {
        return Err(ForecastError::InvalidInput(
            "replications and horizon must be positive".into(),
        ));
    }
    let wave = session.wave();
    if session.is_terminal() {
        return Ok(ForecastResult::settled(
            wave,
            ForecastMethod::Simulate,
            horizon,
        ));
    }
    let start = *session.latest_band().ok_or(ForecastError::NoData)?;
    let p_hat = start.point.clamp(0.0, 1.0);
    let runs: Vec<(usize, bool)> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, &[tag("forecast"), wave as u64, r as u64]);
            continue_once(&mut rng, session, &start, p_hat, horizon)
        })
        .collect::<Result<_, _>>()?;

    let cap_hits = runs.iter().filter(|r| r.1).count();
    let mut counts: Vec<f64> = runs.iter().map(|r| r.0 as f64).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    counts.sort_by(f64::total_cmp);
    // A few very long runs can drag the mean past the upper quantile.
    let low = quantile_sorted(&counts, 0.025).min(mean);
    let high = quantile_sorted(&counts, 0.975).max(mean);
    Ok(ForecastResult {
        wave,
        remaining_batches_point: mean,
        band: (low, high),
        replications,
        method: ForecastMethod::Simulate,
        cap_hits,
        horizon,
    })
}

/// Batches needed for a band of width `width` on `n` observations to shrink
/// to `target`, assuming width `∝ n^{-1/2}`.
pub fn predict_stopping_rate(
    width: f64,
    n: f64,
    target: f64,
    batch_size: usize,
) -> Result<u64, ForecastError> {
    if !(width > 0.0 && n >= 1.0 && target > 0.0 && batch_size >= 1) {
        return Err(ForecastError::InvalidInput(format!(
            "need W > 0, n >= 1, L > 0, B >= 1; got W={width}, n={n}, L={target}, B={batch_size}"
        )));
    }
    if width <= target {
        return Ok(0);
    }
    let extra = n * ((width / target).powi(2) - 1.0);
    // Absorb representation error so exact multiples of B are not rounded up.
    let batches = (extra / batch_size as f64 - 1e-9).ceil().max(0.0);
    Ok(batches as u64)
}

/// Band width at which the rule would fire, assuming a band symmetric about
/// `point`. `None` when no finite width suffices (point on a threshold).
pub fn target_width(rule: &StoppingRule, point: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut offer = |w: f64| {
        if w > 0.0 {
            best = Some(best.map_or(w, |b: f64| b.max(w)));
        }
    };
    if matches!(rule.mode, StopMode::Thresholds | StopMode::Both) {
        if let Some(t) = rule.tau1 {
            offer(2.0 * (point - t));
        }
        if let Some(t) = rule.tau2 {
            offer(2.0 * (t - point));
        }
    }
    if matches!(rule.mode, StopMode::Width | StopMode::Both) {
        if let Some(l) = rule.width_limit {
            offer(l);
        }
    }
    best
}

/// Rate forecast for a live session. Falls back to the horizon when the
/// point estimate sits exactly on a threshold.
pub fn predict_session_rate(
    session: &SessionState,
    horizon: usize,
) -> Result<ForecastResult, ForecastError> {
    let wave = session.wave();
    if session.is_terminal() {
        return Ok(ForecastResult::settled(wave, ForecastMethod::Rate, horizon));
    }
    let band = session.latest_band().ok_or(ForecastError::NoData)?;
    let (batches, capped) = match target_width(&session.config.rule, band.point) {
        Some(l) => {
            let b = predict_stopping_rate(
                band.width().max(f64::MIN_POSITIVE),
                band.k_eff.max(1.0),
                l,
                session.config.policy.batch_size,
            )?;
            let b = b as usize;
            (b.min(horizon), b > horizon)
        }
        None => (horizon, true),
    };
    let b = batches as f64;
    Ok(ForecastResult {
        wave,
        remaining_batches_point: b,
        band: (b, b),
        replications: 0,
        method: ForecastMethod::Rate,
        cap_hits: usize::from(capped),
        horizon,
    })
}
