//! Wave allocation strategies.
//!
//! Four ways to split a batch of `B` reviews over `m` strata:
//!
//! 1. [`allocate_random`]: simple random sampling from the pooled reservoir.
//! 2. [`allocate_stratified_equal`]: `⌊B/m⌋` per stratum ("stratified1").
//! 3. [`allocate_stratified_proportional`]: `⌊B·w_s⌋` with `w_s` frozen at
//!    the initial stratum shares ("stratified2").
//! 4. [`allocate_neyman`]: Neyman allocation on the cumulative sample,
//!    `n_{k,s} = (Σ_{i≤k} n_i)·N_sσ_s / Σ_t N_tσ_t − Σ_{i<k} n_{i,s}`,
//!    with a per-stratum minimum and rescaling to exactly `B`.
//!
//! A stratum whose reservoir runs dry is never sampled again.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Consistency constant making the MAD estimate the normal sd.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("no values to estimate a standard deviation from")]
    EmptyInput,
    #[error("sample sd needs at least two values, got {0}")]
    TooFewValues(usize),
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
    #[error("length mismatch: expected {expected} strata, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("allocation of {requested} in stratum {stratum} exceeds its reservoir of {available}")]
    ExceedsReservoir {
        stratum: usize,
        requested: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Stratified1,
    Stratified2,
    Neyman,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::Stratified1,
        Strategy::Stratified2,
        Strategy::Neyman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Stratified1 => "stratified1",
            Strategy::Stratified2 => "stratified2",
            Strategy::Neyman => "neyman",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SdEstimator {
    #[default]
    Mad,
    SampleSd,
}

/// Where Neyman's `N_s` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SizeBasis {
    /// Number of already validated patients in the stratum.
    #[default]
    Validated,
    /// Full cohort stratum size (classical Neyman allocation).
    Population,
}

fn default_min_per_stratum() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub strategy: Strategy,
    pub batch_size: usize,
    #[serde(default = "default_min_per_stratum")]
    pub min_per_stratum: usize,
    #[serde(default)]
    pub sd_estimator: SdEstimator,
    #[serde(default)]
    pub neyman_size_basis: SizeBasis,
}

impl SamplingPolicy {
    pub fn new(strategy: Strategy, batch_size: usize) -> Self {
        Self {
            strategy,
            batch_size,
            min_per_stratum: default_min_per_stratum(),
            sd_estimator: SdEstimator::Mad,
            neyman_size_basis: SizeBasis::Validated,
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.batch_size == 0 {
            return Err(SamplingError::InvalidPolicy(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Unreviewed patients left per stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservoir {
    counts: Vec<usize>,
}

impl Reservoir {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn m(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_depleted(&self, stratum: usize) -> bool {
        self.counts[stratum] == 0
    }

    /// Remove an allocation. Counts only ever go down.
    pub fn take(&mut self, alloc: &WaveAllocation) -> Result<(), SamplingError> {
        check_len(self.m(), alloc.counts.len())?;
        for (s, (&want, &have)) in alloc.counts.iter().zip(&self.counts).enumerate() {
            if want > have {
                return Err(SamplingError::ExceedsReservoir {
                    stratum: s,
                    requested: want,
                    available: have,
                });
            }
        }
        for (c, &n) in self.counts.iter_mut().zip(&alloc.counts) {
            *c -= n;
        }
        Ok(())
    }
}

/// Per-wave spend `n_{i,s}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AllocationHistory {
    waves: Vec<Vec<usize>>,
}

impl AllocationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_waves(waves: Vec<Vec<usize>>) -> Self {
        Self { waves }
    }

    pub fn push(&mut self, counts: Vec<usize>) {
        self.waves.push(counts);
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn waves(&self) -> &[Vec<usize>] {
        &self.waves
    }

    /// `n_i` for every wave.
    pub fn wave_totals(&self) -> Vec<usize> {
        self.waves.iter().map(|w| w.iter().sum()).collect()
    }

    pub fn total(&self) -> usize {
        self.waves.iter().flatten().sum()
    }

    /// `Σ_i n_{i,s}` per stratum.
    pub fn spent_per_stratum(&self, m: usize) -> Vec<usize> {
        let mut out = vec![0; m];
        for w in &self.waves {
            for (o, &n) in out.iter_mut().zip(w) {
                *o += n;
            }
        }
        out
    }
}

/// How an allocation was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Strategy,
    /// Neyman's first wave, before any stratum sd is available.
    FirstWaveProportional,
    /// Every `N_tσ_t` was zero; proportional allocation used instead.
    ProportionalFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveAllocation {
    /// 1-based wave index.
    pub wave: usize,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl WaveAllocation {
    pub fn new(counts: Vec<usize>) -> Self {
        Self {
            wave: 0,
            counts,
            provenance: Provenance::Strategy,
        }
    }

    pub fn with_wave(mut self, wave: usize) -> Self {
        self.wave = wave;
        self
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), SamplingError> {
    if expected == got {
        Ok(())
    } else {
        Err(SamplingError::DimensionMismatch { expected, got })
    }
}

/// `B` draws without replacement from the pooled reservoir, reported per
/// stratum.
pub fn allocate_random<R: Rng + ?Sized>(
    batch_size: usize,
    reservoir: &Reservoir,
    rng: &mut R,
) -> WaveAllocation {
    let total = reservoir.total();
    let take = batch_size.min(total);
    let mut counts = vec![0; reservoir.m()];
    let mut bounds = Vec::with_capacity(reservoir.m());
    let mut acc = 0;
    for &c in reservoir.counts() {
        acc += c;
        bounds.push(acc);
    }
    for i in index::sample(rng, total, take) {
        let s = bounds.partition_point(|&b| b <= i);
        counts[s] += 1;
    }
    WaveAllocation::new(counts)
}

/// `⌊B/m⌋` per stratum, capped at each reservoir.
pub fn allocate_stratified_equal(batch_size: usize, reservoir: &Reservoir) -> WaveAllocation {
    let m = reservoir.m().max(1);
    let each = batch_size / m;
    WaveAllocation::new(reservoir.counts().iter().map(|&r| each.min(r)).collect())
}

/// `⌊B·w_s⌋` per stratum, capped at each reservoir. `weights` are the
/// initial stratum shares and stay fixed for the whole session.
pub fn allocate_stratified_proportional(
    batch_size: usize,
    weights: &[f64],
    reservoir: &Reservoir,
) -> Result<WaveAllocation, SamplingError> {
    check_len(reservoir.m(), weights.len())?;
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(SamplingError::InvalidPolicy(
            "negative stratum weight".into(),
        ));
    }
    let counts = weights
        .iter()
        .zip(reservoir.counts())
        .map(|(w, &r)| {
            // Guard against 0.3·100 = 29.999…
            let target = (batch_size as f64 * w + 1e-9).floor() as usize;
            target.min(r)
        })
        .collect();
    Ok(WaveAllocation::new(counts))
}

/// Round non-negative real targets to integers summing to `total`, never
/// exceeding `caps`. Largest fractional part first; ties go to the lowest
/// stratum index.
pub fn largest_remainder(targets: &[f64], total: usize, caps: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = targets
        .iter()
        .zip(caps)
        .map(|(&t, &cap)| (t.max(0.0).floor() as usize).min(cap))
        .collect();
    let mut assigned: usize = out.iter().sum();
    if assigned > total {
        // Only reachable through floating error in the targets; trim from the
        // smallest fractional parts.
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fa.total_cmp(&fb).then(b.cmp(&a))
        });
        for s in order
            .into_iter()
            .cycle()
            .take(out.len() * (assigned - total + 1))
        {
            if assigned == total {
                break;
            }
            if out[s] > 0 {
                out[s] -= 1;
                assigned -= 1;
            }
        }
        return out;
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while assigned < total {
        let before = assigned;
        for &s in &order {
            if assigned == total {
                break;
            }
            if out[s] < caps[s] {
                out[s] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    out
}

/// Neyman allocation for wave `history.len() + 1`.
///
/// `sizes` are the `N_s` (validated or population counts, per policy) and
/// `sds` the `σ_s`. Raw targets below `min_per_stratum` are raised to it
/// (depleted strata get zero), then the vector is rescaled to
/// `min(B, reservoir)` as `clamp(c·raw_s, min_s, reservoir_s)` for a common
/// `c`, so neither the floor nor the reservoir cap is broken by the rescale.
pub fn allocate_neyman(
    history: &AllocationHistory,
    batch_size: usize,
    sizes: &[f64],
    sds: &[f64],
    fallback_weights: &[f64],
    reservoir: &Reservoir,
    policy: &SamplingPolicy,
) -> Result<WaveAllocation, SamplingError> {
    let m = reservoir.m();
    check_len(m, sizes.len())?;
    check_len(m, sds.len())?;
    check_len(m, fallback_weights.len())?;

    if history.is_empty() {
        let mut a = allocate_stratified_proportional(batch_size, fallback_weights, reservoir)?;
        a.provenance = Provenance::FirstWaveProportional;
        return Ok(a);
    }
    let products: Vec<f64> = sizes
        .iter()
        .zip(sds)
        .map(|(n, sd)| (n * sd).max(0.0))
        .collect();
    let denom: f64 = products.iter().sum();
    if !(denom > 0.0) {
        let mut a = allocate_stratified_proportional(batch_size, fallback_weights, reservoir)?;
        a.provenance = Provenance::ProportionalFallback;
        return Ok(a);
    }

    let spent = history.spent_per_stratum(m);
    let cumulative = (history.total() + batch_size) as f64;
    let raw: Vec<f64> = products
        .iter()
        .zip(&spent)
        .map(|(p, &prior)| cumulative * p / denom - prior as f64)
        .collect();

    let caps = reservoir.counts();
    let target = batch_size.min(reservoir.total());
    let floors: Vec<usize> = caps
        .iter()
        .map(|&cap| policy.min_per_stratum.min(cap))
        .collect();
    let real = rescale_with_floor(&raw, &floors, caps, target);
    Ok(WaveAllocation::new(largest_remainder(&real, target, caps)))
}

/// Real-valued `clamp(c·max(raw,0), floor, cap)` summing to `target`.
fn rescale_with_floor(raw: &[f64], floors: &[usize], caps: &[usize], target: usize) -> Vec<f64> {
    let target_f = target as f64;
    let floor_sum: usize = floors.iter().sum();
    if floor_sum >= target {
        // Floors alone use up the batch: share it in proportion to them.
        if floor_sum == 0 {
            return vec![0.0; raw.len()];
        }
        return floors
            .iter()
            .map(|&f| f as f64 * target_f / floor_sum as f64)
            .collect();
    }
    let positive: Vec<f64> = raw.iter().map(|r| r.max(0.0)).collect();
    let eval = |c: f64| -> Vec<f64> {
        positive
            .iter()
            .zip(floors.iter().zip(caps))
            .map(|(&p, (&lo, &hi))| (c * p).clamp(lo as f64, hi as f64))
            .collect()
    };
    let sum = |v: &[f64]| v.iter().sum::<f64>();

    // Largest reachable total as c grows.
    let saturated: Vec<f64> = positive
        .iter()
        .zip(floors.iter().zip(caps))
        .map(|(&p, (&lo, &hi))| if p > 0.0 { hi as f64 } else { lo as f64 })
        .collect();
    if sum(&saturated) <= target_f {
        // Strata with positive targets are exhausted; top up the rest in
        // proportion to their remaining room.
        let short = target_f - sum(&saturated);
        let room: Vec<f64> = saturated
            .iter()
            .zip(caps)
            .map(|(&v, &hi)| hi as f64 - v)
            .collect();
        let room_total = sum(&room);
        return saturated
            .iter()
            .zip(&room)
            .map(|(&v, &r)| {
                if room_total > 0.0 {
                    v + short * r / room_total
                } else {
                    v
                }
            })
            .collect();
    }

    let mut hi_c = 1.0;
    while sum(&eval(hi_c)) < target_f {
        hi_c *= 2.0;
    }
    let mut lo_c = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo_c + hi_c);
        if mid <= lo_c || mid >= hi_c {
            break;
        }
        if sum(&eval(mid)) < target_f {
            lo_c = mid;
        } else {
            hi_c = mid;
        }
    }
    eval(hi_c)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Stratum standard deviation, either the scaled median absolute deviation
/// or the usual unbiased estimator.
pub fn estimate_stratum_sd(values: &[f64], method: SdEstimator) -> Result<f64, SamplingError> {
    if values.is_empty() {
        return Err(SamplingError::EmptyInput);
    }
    match method {
        SdEstimator::Mad => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let med = median(&v);
            let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
            dev.sort_by(f64::total_cmp);
            Ok(MAD_SCALE * median(&dev))
        }
        SdEstimator::SampleSd => {
            if values.len() < 2 {
                return Err(SamplingError::TooFewValues(values.len()));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let ss = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            Ok((ss / (n - 1.0)).sqrt())
        }
    }
}
