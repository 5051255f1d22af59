//! Sequential interval constructions for a proportion.
//!
//! * [`lai_interval`]: Lai's confidence sequence. The band at `k` trials with
//!   `s` successes is the set of `p` where `(k+1)·b(k,p,s) ≥ α`, `b` being the
//!   binomial probability mass. Coverage holds simultaneously over all `k`, so
//!   the band can be recomputed after every wave without alpha spending.
//! * [`bayes_interval`]: equal-tailed credible interval of the
//!   `Beta(1+s, 1+k−s)` posterior under a uniform prior.
//! * [`normal_interval`]: normal-approximation interval for a continuous
//!   quantity, spending a geometric share of the overall error at each wave.
//!
//! `k` and `s` are real so that raked effective counts can be used directly;
//! binomial coefficients go through the log-gamma function.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

const BISECT_MAX_ITER: usize = 200;
const QUANTILE_MAX_ITER: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntervalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("alpha {alpha} exceeds the peak {peak} of (k+1)·b(k,p,s); equation has no roots")]
    Degenerate { alpha: f64, peak: f64 },
    #[error("root finder did not converge")]
    NoConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Lai,
    Bayes,
    Normal,
}

impl IntervalMethod {
    pub fn name(self) -> &'static str {
        match self {
            IntervalMethod::Lai => "lai",
            IntervalMethod::Bayes => "bayes",
            IntervalMethod::Normal => "normal",
        }
    }
}

impl std::str::FromStr for IntervalMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lai" => Ok(Self::Lai),
            "bayes" => Ok(Self::Bayes),
            "normal" => Ok(Self::Normal),
            other => Err(format!("unknown interval method {other:?}")),
        }
    }
}

/// A point estimate with its band.
///
/// `point` is the (weighted) sample proportion `s/k`, or `0.5` when `k = 0`.
/// For Lai bands it always lies inside `[lower, upper]`. Credible intervals
/// never reach 0 or 1, so with all-negative or all-positive data the Bayes
/// band sits strictly inside `(0, 1)` while the point is 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub lower: f64,
    pub upper: f64,
    pub point: f64,
    pub method: IntervalMethod,
    pub alpha: f64,
    pub k_eff: f64,
    pub s_eff: f64,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

fn check_counts(k: f64, s: f64, alpha: f64) -> Result<(), IntervalError> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(IntervalError::InvalidInput(format!("k = {k}")));
    }
    if !(s >= 0.0 && s <= k) {
        return Err(IntervalError::InvalidInput(format!(
            "s = {s} not in [0, {k}]"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(IntervalError::InvalidInput(format!("alpha = {alpha}")));
    }
    Ok(())
}

fn point_estimate(k: f64, s: f64) -> f64 {
    if k > 0.0 {
        (s / k).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

/// `ln((k+1)·b(k,p,s))`, with `0·ln 0 = 0`.
pub fn lai_log_statistic(k: f64, s: f64, p: f64) -> f64 {
    let ln_choose = ln_gamma(k + 1.0) - ln_gamma(s + 1.0) - ln_gamma(k - s + 1.0);
    ln_choose_stat(k, s, p, ln_choose)
}

fn ln_choose_stat(k: f64, s: f64, p: f64, ln_choose: f64) -> f64 {
    let mut v = (k + 1.0).ln() + ln_choose;
    if s > 0.0 {
        v += s * p.ln();
    }
    if k - s > 0.0 {
        v += (k - s) * (1.0 - p).ln();
    }
    v
}

/// Bisection for the sign change of `f` on `[lo, hi]`, where `f(lo)` has sign
/// `lo_positive`. Runs until the bracket stops shrinking in floating point.
fn bisect(mut lo: f64, mut hi: f64, lo_positive: bool, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..BISECT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Lai's confidence sequence at `k` trials and `s` successes.
pub fn lai_interval(k: f64, s: f64, alpha: f64) -> Result<IntervalEstimate, IntervalError> {
    check_counts(k, s, alpha)?;
    let out = |lower: f64, upper: f64| IntervalEstimate {
        lower,
        upper,
        point: point_estimate(k, s),
        method: IntervalMethod::Lai,
        alpha,
        k_eff: k,
        s_eff: s,
    };
    if k == 0.0 {
        return Ok(out(0.0, 1.0));
    }

    let ln_alpha = alpha.ln();
    let ln_choose = ln_gamma(k + 1.0) - ln_gamma(s + 1.0) - ln_gamma(k - s + 1.0);
    let g = |p: f64| ln_choose_stat(k, s, p, ln_choose) - ln_alpha;
    let mode = s / k;
    let peak = g(mode);
    if peak < 0.0 {
        return Err(IntervalError::Degenerate {
            alpha,
            peak: (peak + ln_alpha).exp(),
        });
    }

    // g rises to its peak at s/k and falls on either side.
    let lower = if s == 0.0 {
        0.0
    } else {
        bisect(0.0, mode, false, g)
    };
    let upper = if s == k {
        1.0
    } else {
        bisect(mode, 1.0, true, g)
    };
    Ok(out(lower, upper))
}

/// Equal-tailed `1−α` credible interval of `Beta(1+s, 1+k−s)`.
pub fn bayes_interval(k: f64, s: f64, alpha: f64) -> Result<IntervalEstimate, IntervalError> {
    check_counts(k, s, alpha)?;
    let (a, b) = (1.0 + s, 1.0 + k - s);
    Ok(IntervalEstimate {
        lower: beta_quantile(a, b, alpha / 2.0)?,
        upper: beta_quantile(a, b, 1.0 - alpha / 2.0)?,
        point: point_estimate(k, s),
        method: IntervalMethod::Bayes,
        alpha,
        k_eff: k,
        s_eff: s,
    })
}

/// Dispatch for the two binomial constructions.
pub fn binomial_interval(
    method: IntervalMethod,
    k: f64,
    s: f64,
    alpha: f64,
) -> Result<IntervalEstimate, IntervalError> {
    match method {
        IntervalMethod::Lai => lai_interval(k, s, alpha),
        IntervalMethod::Bayes => bayes_interval(k, s, alpha),
        IntervalMethod::Normal => Err(IntervalError::InvalidInput(
            "normal intervals need raw values, not counts".into(),
        )),
    }
}

/// Regularized incomplete Beta function `I_x(a, b)`.
pub fn regularized_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

/// Quantile of `Beta(a, b)`: the `x` with `I_x(a, b) = q`.
///
/// Safeguarded Newton iteration inside a shrinking bisection bracket.
pub fn beta_quantile(a: f64, b: f64, q: f64) -> Result<f64, IntervalError> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(IntervalError::InvalidInput(format!("Beta({a}, {b})")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(IntervalError::InvalidInput(format!("q = {q}")));
    }
    let ln_norm = ln_beta(a, b);
    let density = |x: f64| ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_norm).exp();

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x = a / (a + b);
    for _ in 0..QUANTILE_MAX_ITER {
        let f = regularized_beta(a, b, x) - q;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = density(x);
        let mut next = if d.is_finite() && d > 0.0 {
            x - f / d
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.max(f64::MIN_POSITIVE) || hi - lo <= 1e-300 {
            return Ok(next);
        }
        if next <= lo || next >= hi {
            return Ok(x);
        }
        x = next;
    }
    if hi - lo < 1e-12 {
        Ok(0.5 * (lo + hi))
    } else {
        Err(IntervalError::NoConvergence)
    }
}

/// Per-wave error levels for repeated normal intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha: f64,
    pub rule: SpendingRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpendingRule {
    /// `α_i = α·2^{−(i+1)}`.
    #[default]
    GeometricHalving,
}

impl AlphaSchedule {
    pub fn geometric(alpha: f64) -> Result<Self, IntervalError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(IntervalError::InvalidInput(format!("alpha = {alpha}")));
        }
        Ok(Self {
            alpha,
            rule: SpendingRule::GeometricHalving,
        })
    }

    /// Error spent at wave `i` (0-based).
    pub fn alpha_at(&self, i: u32) -> f64 {
        match self.rule {
            SpendingRule::GeometricHalving => self.alpha * 0.5f64.powi(i as i32 + 1),
        }
    }

    /// `α_0 + … + α_i`, always below the overall `α`.
    pub fn spent_through(&self, i: u32) -> f64 {
        match self.rule {
            SpendingRule::GeometricHalving => self.alpha * (1.0 - 0.5f64.powi(i as i32 + 1)),
        }
    }
}

/// Two-sided normal interval for the mean of `values` at wave `wave_index`,
/// using the standard error and error level `α_i` split evenly between tails.
pub fn normal_interval(
    values: &[f64],
    wave_index: u32,
    schedule: &AlphaSchedule,
) -> Result<IntervalEstimate, IntervalError> {
    if values.len() < 2 {
        return Err(IntervalError::InvalidInput(
            "normal interval needs at least two values".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(IntervalError::InvalidInput("non-finite value".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let level = schedule.alpha_at(wave_index);
    let z = Normal::standard().inverse_cdf(1.0 - level / 2.0);
    let half = z * se;
    Ok(IntervalEstimate {
        lower: mean - half,
        upper: mean + half,
        point: mean,
        method: IntervalMethod::Normal,
        alpha: level,
        k_eff: n,
        s_eff: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lai_closed_forms() {
        // k=1, s=1: 2p = α.
        let i = lai_interval(1.0, 1.0, 0.05).unwrap();
        assert_abs_diff_eq!(i.lower, 0.025, epsilon = 1e-12);
        assert_eq!(i.upper, 1.0);

        // k=2, s=1: 6p(1-p) = α.
        let i = lai_interval(2.0, 1.0, 0.05).unwrap();
        let r = (1.0 - (1.0f64 - 4.0 * 0.05 / 6.0).sqrt()) / 2.0;
        assert_abs_diff_eq!(i.lower, r, epsilon = 1e-12);
        assert_abs_diff_eq!(i.upper, 1.0 - r, epsilon = 1e-12);
        assert_abs_diff_eq!(i.lower, 0.00841, epsilon = 1e-5);

        let i = lai_interval(0.0, 0.0, 0.3).unwrap();
        assert_eq!((i.lower, i.upper, i.point), (0.0, 1.0, 0.5));
    }

    #[test]
    fn lai_zero_successes() {
        let i = lai_interval(10.0, 0.0, 0.05).unwrap();
        assert_eq!(i.lower, 0.0);
        // 11 (1-p)^10 = 0.05
        let expect = 1.0 - (0.05f64 / 11.0).powf(0.1);
        assert_abs_diff_eq!(i.upper, expect, epsilon = 1e-12);
    }

    #[test]
    fn lai_rejects_bad_input() {
        assert!(lai_interval(3.0, 4.0, 0.05).is_err());
        assert!(lai_interval(-1.0, 0.0, 0.05).is_err());
        assert!(lai_interval(3.0, 1.0, 1.0).is_err());
        assert!(lai_interval(3.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn bayes_examples() {
        let i = bayes_interval(0.0, 0.0, 0.05).unwrap();
        assert_abs_diff_eq!(i.lower, 0.025, epsilon = 1e-12);
        assert_abs_diff_eq!(i.upper, 0.975, epsilon = 1e-12);
        let i = bayes_interval(1.0, 1.0, 0.05).unwrap();
        assert_abs_diff_eq!(i.lower, 0.025f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(i.upper, 0.975f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn beta_quantile_examples() {
        assert_abs_diff_eq!(beta_quantile(1.0, 1.0, 0.5).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(beta_quantile(2.0, 2.0, 0.5).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(beta_quantile(2.0, 1.0, 0.25).unwrap(), 0.5, epsilon = 1e-12);
        assert!(beta_quantile(0.0, 1.0, 0.5).is_err());
        assert!(beta_quantile(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn beta_quantile_extreme_shapes() {
        for &(a, b, q) in &[
            (0.5, 0.5, 0.01),
            (501.0, 1.0, 0.025),
            (1.0, 501.0, 0.975),
            (0.1, 30.0, 0.5),
            (2000.0, 3000.0, 0.999),
        ] {
            let x = beta_quantile(a, b, q).unwrap();
            assert!((regularized_beta(a, b, x) - q).abs() < 1e-10, "{a} {b} {q}");
        }
    }

    #[test]
    fn alpha_schedule_sums_below_alpha() {
        let s = AlphaSchedule::geometric(0.05).unwrap();
        assert_abs_diff_eq!(s.alpha_at(0), 0.025, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_at(1), 0.0125, epsilon = 1e-15);
        let mut total = 0.0;
        for i in 0..40 {
            total += s.alpha_at(i);
            assert!(total < 0.05);
            assert_abs_diff_eq!(total, s.spent_through(i), epsilon = 1e-15);
        }
        assert_abs_diff_eq!(total, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn normal_interval_shape() {
        let s = AlphaSchedule::geometric(0.05).unwrap();
        let i = normal_interval(&[2.0, 2.0, 2.0], 0, &s).unwrap();
        assert_eq!((i.lower, i.upper), (2.0, 2.0));
        let data = [0.3, 1.7, 2.2, -0.4, 5.1, 0.9];
        let i = normal_interval(&data, 3, &s).unwrap();
        assert_abs_diff_eq!(i.upper - i.point, i.point - i.lower, epsilon = 1e-12);
        assert!(i.lower < i.point);
        // Later waves spend less error, so the band widens.
        let j = normal_interval(&data, 4, &s).unwrap();
        assert!(j.width() > i.width());
        assert!(normal_interval(&[1.0], 0, &s).is_err());
    }
}
