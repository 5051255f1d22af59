//! The multi-wave review session.
//!
//! One wave is: allocate a batch over strata, collect reference labels for the
//! allocated patients, rake the cumulative reviewed sample to the cohort's
//! stratum distribution, recompute the band from the effective counts and
//! test the stopping rule. [`SessionState`] holds everything needed to audit
//! or resume a study and serialises to a versioned JSON document.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortError};
use crate::intervals::{binomial_interval, IntervalError, IntervalEstimate, IntervalMethod};
use crate::raking::{raking_weights, RakingConfig, RakingError, RakingFactor, WeightedSample};
use crate::rng::{rng_for, tag};
use crate::sampling::{
    allocate_neyman, allocate_random, allocate_stratified_equal, allocate_stratified_proportional,
    estimate_stratum_sd, AllocationHistory, Reservoir, SamplingError, SamplingPolicy, SizeBasis,
    Strategy, WaveAllocation,
};

pub const SESSION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("session is {}; no further waves accepted", .0.name())]
    Stopped(StopStatus),
    #[error("reservoir exhausted; session closed")]
    Exhausted,
    #[error("no pending allocation; request one first")]
    NoPending,
    #[error("records do not match the pending allocation: {0}")]
    Mismatch(RecordMismatch),
    #[error("session file schema version {found}, expected {SESSION_SCHEMA_VERSION}")]
    Version { found: u64 },
    #[error("corrupt session: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Raking(#[from] RakingError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

/// Ids that made a wave submission unacceptable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMismatch {
    /// Submitted but not part of the pending allocation.
    pub unexpected: Vec<String>,
    /// Allocated but not submitted.
    pub missing: Vec<String>,
    /// Submitted more than once.
    pub duplicated: Vec<String>,
}

impl RecordMismatch {
    pub fn is_empty(&self) -> bool {
        self.unexpected.is_empty() && self.missing.is_empty() && self.duplicated.is_empty()
    }

    pub fn offending_ids(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .unexpected
            .iter()
            .chain(&self.missing)
            .chain(&self.duplicated)
            .cloned()
            .collect();
        all.dedup();
        all
    }
}

impl std::fmt::Display for RecordMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.unexpected.is_empty() {
            parts.push(format!("unexpected ids {}", self.unexpected.join(",")));
        }
        if !self.missing.is_empty() {
            parts.push(format!("missing ids {}", self.missing.join(",")));
        }
        if !self.duplicated.is_empty() {
            parts.push(format!("duplicated ids {}", self.duplicated.join(",")));
        }
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    #[default]
    Thresholds,
    Width,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingRule {
    #[serde(default)]
    pub tau1: Option<f64>,
    #[serde(default)]
    pub tau2: Option<f64>,
    #[serde(default)]
    pub width_limit: Option<f64>,
    #[serde(default)]
    pub mode: StopMode,
}

impl StoppingRule {
    /// Stop above when `lower > tau1`, for futility when `upper < tau2`.
    pub fn thresholds(tau1: f64, tau2: f64) -> Self {
        Self {
            tau1: Some(tau1),
            tau2: Some(tau2),
            width_limit: None,
            mode: StopMode::Thresholds,
        }
    }

    pub fn width(limit: f64) -> Self {
        Self {
            tau1: None,
            tau2: None,
            width_limit: Some(limit),
            mode: StopMode::Width,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let uses_thresholds = matches!(self.mode, StopMode::Thresholds | StopMode::Both);
        let uses_width = matches!(self.mode, StopMode::Width | StopMode::Both);
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if let Some(t) = t {
                if !(0.0..=1.0).contains(&t) {
                    v.push(format!("{name} = {t} outside [0, 1]"));
                }
            }
        }
        if let (Some(a), Some(b)) = (self.tau1, self.tau2) {
            if a > b {
                v.push(format!("tau1 = {a} exceeds tau2 = {b}"));
            }
        }
        if uses_thresholds && self.tau1.is_none() && self.tau2.is_none() {
            v.push("threshold mode needs tau1 or tau2".into());
        }
        if uses_width {
            match self.width_limit {
                Some(w) if w > 0.0 => {}
                Some(w) => v.push(format!("width_limit = {w} must be positive")),
                None => v.push("width mode needs width_limit".into()),
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopStatus {
    Continue,
    StopAbove,
    StopFutility,
    StopWidth,
    Exhausted,
}

impl StopStatus {
    pub fn name(self) -> &'static str {
        match self {
            StopStatus::Continue => "continue",
            StopStatus::StopAbove => "stop_above",
            StopStatus::StopFutility => "stop_futility",
            StopStatus::StopWidth => "stop_width",
            StopStatus::Exhausted => "exhausted",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != StopStatus::Continue
    }

    /// Met a stopping criterion (as opposed to running out of patients).
    pub fn is_stopped(self) -> bool {
        matches!(
            self,
            StopStatus::StopAbove | StopStatus::StopFutility | StopStatus::StopWidth
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub status: StopStatus,
    pub wave: usize,
    pub interval: Option<IntervalEstimate>,
}

/// Classify one band against the rule.
///
/// When the band clears both thresholds at once (only possible with
/// `tau1 < tau2`), the point estimate decides: below the midpoint of the two
/// thresholds counts as futility.
pub fn evaluate_stopping(interval: &IntervalEstimate, rule: &StoppingRule) -> StopDecision {
    let thresholds = matches!(rule.mode, StopMode::Thresholds | StopMode::Both);
    let width = matches!(rule.mode, StopMode::Width | StopMode::Both);
    let above = thresholds && rule.tau1.is_some_and(|t| interval.lower > t);
    let futile = thresholds && rule.tau2.is_some_and(|t| interval.upper < t);
    let status = match (above, futile) {
        (true, true) => {
            let mid = 0.5 * (rule.tau1.unwrap_or(0.0) + rule.tau2.unwrap_or(1.0));
            if interval.point < mid {
                StopStatus::StopFutility
            } else {
                StopStatus::StopAbove
            }
        }
        (true, false) => StopStatus::StopAbove,
        (false, true) => StopStatus::StopFutility,
        (false, false) => {
            if width && rule.width_limit.is_some_and(|l| interval.width() < l) {
                StopStatus::StopWidth
            } else {
                StopStatus::Continue
            }
        }
    };
    StopDecision {
        status,
        wave: 0,
        interval: Some(*interval),
    }
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub policy: SamplingPolicy,
    pub rule: StoppingRule,
    pub method: IntervalMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub raking: RakingConfig,
    #[serde(default)]
    pub seed: u64,
    /// Intersect each new band with the previous one.
    #[serde(default)]
    pub intersect_bands: bool,
}

impl SessionConfig {
    pub fn new(policy: SamplingPolicy, rule: StoppingRule, method: IntervalMethod) -> Self {
        Self {
            policy,
            rule,
            method,
            alpha: default_alpha(),
            raking: RakingConfig::default(),
            seed: 0,
            intersect_bands: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let mut v = self.rule.violations();
        if let Err(e) = self.policy.validate() {
            v.push(e.to_string());
        }
        if let Err(e) = self.raking.validate() {
            v.push(e.to_string());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            v.push(format!("alpha = {} outside (0, 1)", self.alpha));
        }
        if self.method == IntervalMethod::Normal {
            v.push("binary PPV sessions support lai or bayes intervals".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Validation(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub patient_id: String,
    pub label: bool,
}

impl ReviewRecord {
    pub fn new(patient_id: impl Into<String>, label: bool) -> Self {
        Self {
            patient_id: patient_id.into(),
            label,
        }
    }
}

/// Patients allocated for the wave in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingWave {
    pub allocation: WaveAllocation,
    pub patient_ids: Vec<String>,
    pub strata: Vec<usize>,
    rows: Vec<usize>,
}

/// A completed wave, as reviewed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveLog {
    pub allocation: WaveAllocation,
    pub records: Vec<ReviewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tallies {
    pub k: usize,
    pub s: usize,
    pub reviewed_per_stratum: Vec<usize>,
    pub successes_per_stratum: Vec<usize>,
}

/// Randomness is drawn from per-wave streams derived from `seed`; the next
/// wave index is the only moving part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_wave: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub config: SessionConfig,
    pub cohort: Cohort,
    /// Stratum shares at session start; stratified2 and the Neyman fallback
    /// keep using these.
    pub initial_weights: Vec<f64>,
    pub reservoir: Reservoir,
    pub history: AllocationHistory,
    pub waves: Vec<WaveLog>,
    pub pending: Option<PendingWave>,
    pub tallies: Tallies,
    /// Cohort row of each reviewed patient, in review order.
    pub review_order: Vec<usize>,
    /// Current raking weights, aligned with `review_order`.
    pub weights: Vec<f64>,
    pub bands: Vec<IntervalEstimate>,
    pub status: StopDecision,
    pub rng: RngState,
}

impl SessionState {
    pub fn create(config: SessionConfig, cohort: Cohort) -> Result<Self, EngineError> {
        config.validate()?;
        cohort.validate()?;
        if cohort.is_empty() {
            return Err(EngineError::Validation(vec!["cohort is empty".into()]));
        }
        if cohort.rows().iter().any(|r| r.reviewed) {
            return Err(EngineError::Validation(vec![
                "cohort already contains reviewed patients".into(),
            ]));
        }
        let m = cohort.spec().m();
        let seed = config.seed;
        Ok(Self {
            schema_version: SESSION_SCHEMA_VERSION,
            initial_weights: cohort.stratum_proportions(),
            reservoir: Reservoir::new(cohort.stratum_sizes()),
            cohort,
            config,
            history: AllocationHistory::new(),
            waves: Vec::new(),
            pending: None,
            tallies: Tallies {
                k: 0,
                s: 0,
                reviewed_per_stratum: vec![0; m],
                successes_per_stratum: vec![0; m],
            },
            review_order: Vec::new(),
            weights: Vec::new(),
            bands: Vec::new(),
            status: StopDecision {
                status: StopStatus::Continue,
                wave: 0,
                interval: None,
            },
            rng: RngState { seed, next_wave: 1 },
        })
    }

    /// Number of completed waves.
    pub fn wave(&self) -> usize {
        self.waves.len()
    }

    pub fn is_terminal(&self) -> bool {
        self.status.status.is_terminal()
    }

    pub fn latest_band(&self) -> Option<&IntervalEstimate> {
        self.bands.last()
    }

    fn ensure_open(&self) -> Result<(), EngineError> {
        match self.status.status {
            StopStatus::Continue => Ok(()),
            StopStatus::Exhausted => Err(EngineError::Exhausted),
            s => Err(EngineError::Stopped(s)),
        }
    }

    fn stratum_labels(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.cohort.spec().m()];
        for &row in &self.review_order {
            let r = &self.cohort.rows()[row];
            out[r.stratum].push(if r.label == Some(true) { 1.0 } else { 0.0 });
        }
        out
    }

    /// Per-stratum `(N_s, σ_s)` for Neyman allocation.
    fn neyman_inputs(&self) -> (Vec<f64>, Vec<f64>) {
        let policy = &self.config.policy;
        let by_stratum = self.stratum_labels();
        let pooled: Vec<f64> = by_stratum.iter().flatten().copied().collect();
        let pooled_sd = estimate_stratum_sd(&pooled, policy.sd_estimator).unwrap_or(0.0);
        let sds = by_stratum
            .iter()
            .map(|v| estimate_stratum_sd(v, policy.sd_estimator).unwrap_or(pooled_sd))
            .collect();
        let sizes = match policy.neyman_size_basis {
            SizeBasis::Validated => self
                .tallies
                .reviewed_per_stratum
                .iter()
                .map(|&n| n as f64)
                .collect(),
            SizeBasis::Population => self
                .cohort
                .stratum_sizes()
                .into_iter()
                .map(|n| n as f64)
                .collect(),
        };
        (sizes, sds)
    }

    fn compute_allocation(&self, wave: usize) -> Result<WaveAllocation, EngineError> {
        let policy = &self.config.policy;
        let b = policy.batch_size;
        let alloc = match policy.strategy {
            Strategy::Random => {
                let mut rng = rng_for(self.rng.seed, &[tag("allocate"), wave as u64]);
                allocate_random(b, &self.reservoir, &mut rng)
            }
            Strategy::Stratified1 => allocate_stratified_equal(b, &self.reservoir),
            Strategy::Stratified2 => {
                allocate_stratified_proportional(b, &self.initial_weights, &self.reservoir)?
            }
            Strategy::Neyman => {
                let (sizes, sds) = self.neyman_inputs();
                allocate_neyman(
                    &self.history,
                    b,
                    &sizes,
                    &sds,
                    &self.initial_weights,
                    &self.reservoir,
                    policy,
                )?
            }
        };
        Ok(alloc.with_wave(wave))
    }

    /// Allocation for the next wave. Repeated calls return the same pending
    /// wave until [`SessionState::record_wave`] consumes it.
    pub fn next_allocation(&mut self) -> Result<&PendingWave, EngineError> {
        self.ensure_open()?;
        if self.pending.is_none() {
            let wave = self.wave() + 1;
            let allocation = self.compute_allocation(wave)?;
            if allocation.total() == 0 {
                self.status = StopDecision {
                    status: StopStatus::Exhausted,
                    wave: self.wave(),
                    interval: self.bands.last().copied(),
                };
                return Err(EngineError::Exhausted);
            }
            let mut rng = rng_for(self.rng.seed, &[tag("select"), wave as u64]);
            let pools = self.cohort.unreviewed_by_stratum();
            let mut rows = Vec::with_capacity(allocation.total());
            let mut strata = Vec::with_capacity(allocation.total());
            for (s, (&n, pool)) in allocation.counts.iter().zip(&pools).enumerate() {
                for i in index::sample(&mut rng, pool.len(), n) {
                    rows.push(pool[i]);
                    strata.push(s);
                }
            }
            let patient_ids = rows
                .iter()
                .map(|&r| self.cohort.rows()[r].patient_id.clone())
                .collect();
            self.pending = Some(PendingWave {
                allocation,
                patient_ids,
                strata,
                rows,
            });
        }
        Ok(self.pending.as_ref().expect("pending set above"))
    }

    fn check_records(pending: &PendingWave, records: &[ReviewRecord]) -> RecordMismatch {
        let expected: HashSet<&str> = pending.patient_ids.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        let mut mismatch = RecordMismatch::default();
        for r in records {
            if !expected.contains(r.patient_id.as_str()) {
                mismatch.unexpected.push(r.patient_id.clone());
            } else if !seen.insert(r.patient_id.as_str()) {
                mismatch.duplicated.push(r.patient_id.clone());
            }
        }
        mismatch.missing = pending
            .patient_ids
            .iter()
            .filter(|id| !seen.contains(id.as_str()))
            .cloned()
            .collect();
        mismatch
    }

    /// Ingest reference labels for the pending wave and re-evaluate.
    pub fn record_wave(&mut self, records: &[ReviewRecord]) -> Result<&StopDecision, EngineError> {
        self.ensure_open()?;
        let pending = self.pending.as_ref().ok_or(EngineError::NoPending)?;
        let mismatch = Self::check_records(pending, records);
        if !mismatch.is_empty() {
            return Err(EngineError::Mismatch(mismatch));
        }
        let pending = self.pending.take().expect("checked above");
        let labels: HashMap<&str, bool> = records
            .iter()
            .map(|r| (r.patient_id.as_str(), r.label))
            .collect();

        self.reservoir.take(&pending.allocation)?;
        self.history.push(pending.allocation.counts.clone());
        let mut ordered = Vec::with_capacity(pending.rows.len());
        for (&row, id) in pending.rows.iter().zip(&pending.patient_ids) {
            let y = labels[id.as_str()];
            let stratum = self.cohort.rows()[row].stratum;
            self.cohort.mark_reviewed(row, y);
            self.review_order.push(row);
            self.tallies.k += 1;
            self.tallies.reviewed_per_stratum[stratum] += 1;
            if y {
                self.tallies.s += 1;
                self.tallies.successes_per_stratum[stratum] += 1;
            }
            ordered.push(ReviewRecord::new(id.clone(), y));
        }
        let wave = pending.allocation.wave;
        self.waves.push(WaveLog {
            allocation: pending.allocation,
            records: ordered,
        });
        self.rng.next_wave = wave + 1;

        let sample = self.rake()?;
        self.weights = sample.weights;
        let mut band = binomial_interval(
            self.config.method,
            sample.k_eff,
            sample.s_eff,
            self.config.alpha,
        )?;
        if self.config.intersect_bands {
            if let Some(prev) = self.bands.last() {
                let (lo, hi) = (band.lower.max(prev.lower), band.upper.min(prev.upper));
                if lo <= hi {
                    band.lower = lo;
                    band.upper = hi;
                }
            }
        }
        self.bands.push(band);

        let mut decision = evaluate_stopping(&band, &self.config.rule);
        decision.wave = wave;
        if !decision.status.is_terminal() && self.reservoir.total() == 0 {
            decision.status = StopStatus::Exhausted;
        }
        self.status = decision;
        Ok(&self.status)
    }

    /// Raking weights of every reviewed patient against the cohort's stratum
    /// shares. Strata with no reviewed patient yet are left out of the target
    /// and the remaining shares renormalised.
    fn rake(&self) -> Result<WeightedSample, EngineError> {
        let m = self.cohort.spec().m();
        let pop = self.cohort.stratum_proportions();
        let reviewed = &self.tallies.reviewed_per_stratum;
        let kept: Vec<usize> = (0..m)
            .filter(|&s| reviewed[s] > 0 && pop[s] > 0.0)
            .collect();
        let mut remap = vec![usize::MAX; m];
        for (j, &s) in kept.iter().enumerate() {
            remap[s] = j;
        }
        let kept_total: f64 = kept.iter().map(|&s| pop[s]).sum();
        let population: Vec<f64> = kept.iter().map(|&s| pop[s] / kept_total).collect();
        let rows = self.cohort.rows();
        let categories = self
            .review_order
            .iter()
            .map(|&r| remap[rows[r].stratum])
            .collect();
        let labels: Vec<bool> = self
            .review_order
            .iter()
            .map(|&r| rows[r].label == Some(true))
            .collect();
        let outcome = raking_weights(
            &[RakingFactor {
                categories,
                population,
            }],
            &self.config.raking,
        )?;
        Ok(WeightedSample::new(&labels, outcome.weights)?)
    }

    /// Rebuild a session from its configuration, the original cohort and a
    /// wave log, checking each logged allocation is reproduced.
    pub fn replay(
        config: SessionConfig,
        cohort: Cohort,
        log: &[WaveLog],
    ) -> Result<Self, EngineError> {
        let mut session = Self::create(config, cohort)?;
        for (i, w) in log.iter().enumerate() {
            let pending = session.next_allocation()?;
            if pending.allocation != w.allocation {
                return Err(EngineError::Corrupt(format!(
                    "wave {} allocation differs on replay",
                    i + 1
                )));
            }
            session.record_wave(&w.records)?;
        }
        Ok(session)
    }

    pub fn to_json(&self) -> Result<String, EngineError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| EngineError::Corrupt("missing schema_version".into()))?;
        if found != u64::from(SESSION_SCHEMA_VERSION) {
            return Err(EngineError::Version { found });
        }
        let state: Self = serde_json::from_value(value)?;
        state.check_consistency()?;
        Ok(state)
    }

    fn check_consistency(&self) -> Result<(), EngineError> {
        self.cohort.validate()?;
        let labelled: usize = self.waves.iter().map(|w| w.records.len()).sum();
        let corrupt = |m: &str| Err(EngineError::Corrupt(m.into()));
        if labelled != self.tallies.k || self.review_order.len() != self.tallies.k {
            return corrupt("tallies disagree with the wave log");
        }
        if self.bands.len() != self.waves.len() {
            return corrupt("band history length differs from completed waves");
        }
        if self.weights.len() != self.review_order.len() {
            return corrupt("weights not aligned with reviewed patients");
        }
        if self.history.len() != self.waves.len() {
            return corrupt("allocation history length differs from completed waves");
        }
        Ok(())
    }

    /// Write atomically: serialise to a sibling temp file, then rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        let path = path.as_ref();
        let json = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(json.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Snapshot for status endpoints and the `session-status` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub schema_version: u32,
    pub wave: usize,
    pub decision: StopDecision,
    pub interval: Option<IntervalEstimate>,
    pub tallies: Tallies,
    pub reservoir: Vec<usize>,
    /// Wave index of an allocation awaiting labels.
    pub pending_wave: Option<usize>,
}

/// One row of the band history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub wave: usize,
    pub allocation: Vec<usize>,
    pub k: usize,
    pub s: usize,
    pub interval: IntervalEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub schema_version: u32,
    pub wave: usize,
    pub rule: StoppingRule,
    pub entries: Vec<HistoryEntry>,
    pub decision: StopDecision,
}

/// A pending allocation as handed to reviewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationView {
    pub schema_version: u32,
    /// Completed waves; the allocation is for `wave + 1`.
    pub wave: usize,
    pub allocation: WaveAllocation,
    pub patients: Vec<AllocatedPatient>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatedPatient {
    pub patient_id: String,
    pub stratum: usize,
}

impl SessionState {
    pub fn status_view(&self) -> StatusView {
        StatusView {
            schema_version: SESSION_SCHEMA_VERSION,
            wave: self.wave(),
            decision: self.status.clone(),
            interval: self.bands.last().copied(),
            tallies: self.tallies.clone(),
            reservoir: self.reservoir.counts().to_vec(),
            pending_wave: self.pending.as_ref().map(|p| p.allocation.wave),
        }
    }

    pub fn history_view(&self) -> HistoryView {
        let (mut k, mut s) = (0, 0);
        let entries = self
            .waves
            .iter()
            .zip(&self.bands)
            .map(|(w, b)| {
                k += w.records.len();
                s += w.records.iter().filter(|r| r.label).count();
                HistoryEntry {
                    wave: w.allocation.wave,
                    allocation: w.allocation.counts.clone(),
                    k,
                    s,
                    interval: *b,
                }
            })
            .collect();
        HistoryView {
            schema_version: SESSION_SCHEMA_VERSION,
            wave: self.wave(),
            rule: self.config.rule.clone(),
            entries,
            decision: self.status.clone(),
        }
    }

    /// View of the pending allocation, if any.
    pub fn allocation_view(&self) -> Option<AllocationView> {
        self.pending.as_ref().map(|p| AllocationView {
            schema_version: SESSION_SCHEMA_VERSION,
            wave: self.wave(),
            allocation: p.allocation.clone(),
            patients: p
                .patient_ids
                .iter()
                .zip(&p.strata)
                .map(|(id, &stratum)| AllocatedPatient {
                    patient_id: id.clone(),
                    stratum,
                })
                .collect(),
        })
    }
}

/// Drive a session to termination with labels from a hidden truth table.
pub fn run_to_completion(
    session: &mut SessionState,
    truth: &[bool],
) -> Result<StopDecision, EngineError> {
    while !session.is_terminal() {
        let records: Vec<ReviewRecord> = match session.next_allocation() {
            Ok(p) => p
                .rows
                .iter()
                .zip(&p.patient_ids)
                .map(|(&row, id)| ReviewRecord::new(id.clone(), truth[row]))
                .collect(),
            Err(EngineError::Exhausted) => break,
            Err(e) => return Err(e),
        };
        session.record_wave(&records)?;
    }
    Ok(session.status.clone())
}

impl PendingWave {
    /// Cohort row indices of the allocated patients.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{gen_cohort, gen_labels_nonlinked, ScenarioConfig, StratumSpec};
    use crate::intervals::bayes_interval;

    fn band(lower: f64, upper: f64) -> IntervalEstimate {
        IntervalEstimate {
            lower,
            upper,
            point: 0.5 * (lower + upper),
            method: IntervalMethod::Lai,
            alpha: 0.05,
            k_eff: 100.0,
            s_eff: 50.0,
        }
    }

    fn small_session(strategy: Strategy, method: IntervalMethod) -> (SessionState, Vec<bool>) {
        let cfg = ScenarioConfig::nonlinked(2000, 0.8, 21);
        let cohort = gen_cohort(&cfg, &StratumSpec::frailty()).unwrap();
        let truth = gen_labels_nonlinked(&cohort, 0.8, 5).unwrap().labels;
        let config = SessionConfig::new(
            SamplingPolicy::new(strategy, 100),
            StoppingRule::thresholds(0.75, 0.75),
            method,
        )
        .with_seed(99);
        (SessionState::create(config, cohort).unwrap(), truth)
    }

    fn answer(session: &SessionState, truth: &[bool]) -> Vec<ReviewRecord> {
        let p = session.pending.as_ref().unwrap();
        p.rows
            .iter()
            .zip(&p.patient_ids)
            .map(|(&r, id)| ReviewRecord::new(id.clone(), truth[r]))
            .collect()
    }

    #[test]
    fn stopping_examples() {
        let rule = StoppingRule::thresholds(0.75, 0.75);
        assert_eq!(
            evaluate_stopping(&band(0.76, 0.95), &rule).status,
            StopStatus::StopAbove
        );
        assert_eq!(
            evaluate_stopping(&band(0.40, 0.74), &rule).status,
            StopStatus::StopFutility
        );
        assert_eq!(
            evaluate_stopping(&band(0.70, 0.80), &rule).status,
            StopStatus::Continue
        );
        assert_eq!(
            evaluate_stopping(&band(0.77, 0.81), &StoppingRule::width(0.05)).status,
            StopStatus::StopWidth
        );
        assert_eq!(
            evaluate_stopping(&band(0.70, 0.80), &StoppingRule::width(0.05)).status,
            StopStatus::Continue
        );
    }

    #[test]
    fn simultaneous_thresholds_use_the_midpoint() {
        let rule = StoppingRule::thresholds(0.75, 0.85);
        let mut b = band(0.76, 0.84);
        b.point = 0.79;
        assert_eq!(
            evaluate_stopping(&b, &rule).status,
            StopStatus::StopFutility
        );
        b.point = 0.81;
        assert_eq!(evaluate_stopping(&b, &rule).status, StopStatus::StopAbove);
    }

    #[test]
    fn both_mode_checks_width_after_thresholds() {
        let rule = StoppingRule {
            tau1: Some(0.9),
            tau2: Some(0.9),
            width_limit: Some(0.05),
            mode: StopMode::Both,
        };
        assert_eq!(
            evaluate_stopping(&band(0.88, 0.92), &rule).status,
            StopStatus::StopWidth
        );
        assert_eq!(
            evaluate_stopping(&band(0.80, 0.85), &rule).status,
            StopStatus::StopFutility
        );
    }

    #[test]
    fn create_validates() {
        let cohort = gen_cohort(
            &ScenarioConfig::nonlinked(50, 0.5, 1),
            &StratumSpec::frailty(),
        )
        .unwrap();
        let good = SessionConfig::new(
            SamplingPolicy::new(Strategy::Random, 10),
            StoppingRule::thresholds(0.7, 0.8),
            IntervalMethod::Bayes,
        );
        let s = SessionState::create(good.clone(), cohort.clone()).unwrap();
        assert_eq!(s.tallies.k, 0);
        assert!(s.bands.is_empty());
        assert_eq!(s.status.status, StopStatus::Continue);

        let mut bad = good.clone();
        bad.rule = StoppingRule::thresholds(0.8, 0.7);
        assert!(matches!(
            SessionState::create(bad, cohort.clone()),
            Err(EngineError::Validation(v)) if v[0].contains("tau1")
        ));
        let mut bad = good.clone();
        bad.policy.batch_size = 0;
        assert!(matches!(
            SessionState::create(bad, cohort.clone()),
            Err(EngineError::Validation(_))
        ));
        let mut bad = good;
        bad.method = IntervalMethod::Normal;
        assert!(SessionState::create(bad, cohort).is_err());
    }

    #[test]
    fn allocation_is_idempotent_until_recorded() {
        let (mut s, truth) = small_session(Strategy::Stratified1, IntervalMethod::Bayes);
        let first = s.next_allocation().unwrap().clone();
        assert_eq!(first.allocation.counts, vec![20; 5]);
        assert_eq!(s.next_allocation().unwrap(), &first);
        let recs = answer(&s, &truth);
        s.record_wave(&recs).unwrap();
        assert_ne!(s.next_allocation().unwrap().patient_ids, first.patient_ids);
    }

    #[test]
    fn record_rejects_mismatches() {
        let (mut s, truth) = small_session(Strategy::Random, IntervalMethod::Bayes);
        assert!(matches!(s.record_wave(&[]), Err(EngineError::NoPending)));
        s.next_allocation().unwrap();
        let mut recs = answer(&s, &truth);
        let dropped = recs.pop().unwrap();
        recs.push(ReviewRecord::new("nobody", true));
        recs.push(recs[0].clone());
        match s.record_wave(&recs) {
            Err(EngineError::Mismatch(m)) => {
                assert_eq!(m.unexpected, vec!["nobody".to_string()]);
                assert_eq!(m.missing, vec![dropped.patient_id]);
                assert_eq!(m.duplicated, vec![recs[0].patient_id.clone()]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(s.wave(), 0);
        assert!(s.pending.is_some());
    }

    #[test]
    fn unit_weight_point_and_tallies() {
        let (mut s, _) = small_session(Strategy::Stratified1, IntervalMethod::Bayes);
        s.next_allocation().unwrap();
        let p = s.pending.clone().unwrap();
        // 80 of 100 positive, 16 per stratum so the sample is balanced.
        let recs: Vec<_> = p
            .patient_ids
            .iter()
            .enumerate()
            .map(|(i, id)| ReviewRecord::new(id.clone(), i % 20 < 16))
            .collect();
        s.record_wave(&recs).unwrap();
        let b = *s.latest_band().unwrap();
        assert_eq!(b.point, 0.8);
        assert_eq!(b, bayes_interval(100.0, 80.0, 0.05).unwrap());
        assert_eq!(s.tallies.k, 100);
        assert_eq!(s.tallies.s, 80);
    }

    #[test]
    fn two_waves_accumulate() {
        let (mut s, truth) = small_session(Strategy::Random, IntervalMethod::Lai);
        for _ in 0..2 {
            s.next_allocation().unwrap();
            let r = answer(&s, &truth);
            s.record_wave(&r).unwrap();
        }
        assert_eq!(s.tallies.k, 200);
        assert_eq!(s.bands.len(), 2);
        assert_eq!(s.status.wave, 2);
    }

    #[test]
    fn depleted_stratum_stays_empty() {
        let spec = StratumSpec::new(vec![0.0, 0.5, 1.0], None).unwrap();
        let ids = (0..230).map(|i| format!("p{i}")).collect();
        let cov: Vec<f64> = (0..230).map(|i| if i < 30 { 0.2 } else { 0.7 }).collect();
        let cohort = Cohort::from_covariates(ids, &cov, spec).unwrap();
        let config = SessionConfig::new(
            SamplingPolicy::new(Strategy::Stratified1, 60),
            StoppingRule::width(1e-6),
            IntervalMethod::Bayes,
        );
        let mut s = SessionState::create(config, cohort).unwrap();
        let truth = vec![true; 230];
        let mut first_counts = Vec::new();
        while !s.is_terminal() {
            match s.next_allocation() {
                Ok(p) => first_counts.push(p.allocation.counts.clone()),
                Err(EngineError::Exhausted) => break,
                Err(e) => panic!("{e}"),
            }
            let r = answer(&s, &truth);
            s.record_wave(&r).unwrap();
        }
        assert_eq!(first_counts[0], vec![30, 30]);
        assert!(first_counts[1..].iter().all(|c| c[0] == 0));
        assert_eq!(s.status.status, StopStatus::Exhausted);
        assert!(matches!(s.next_allocation(), Err(EngineError::Exhausted)));
    }

    #[test]
    fn terminal_sessions_reject_work() {
        let (mut s, truth) = small_session(Strategy::Random, IntervalMethod::Bayes);
        let d = run_to_completion(&mut s, &truth).unwrap();
        assert!(d.status.is_terminal());
        assert!(matches!(s.next_allocation(), Err(EngineError::Stopped(_))));
        assert!(s.record_wave(&[]).is_err());
    }

    #[test]
    fn neyman_first_wave_is_proportional() {
        let (mut s, _) = small_session(Strategy::Neyman, IntervalMethod::Bayes);
        let expect =
            allocate_stratified_proportional(100, &s.initial_weights, &s.reservoir).unwrap();
        let got = s.next_allocation().unwrap();
        assert_eq!(got.allocation.counts, expect.counts);
        assert_eq!(
            got.allocation.provenance,
            crate::sampling::Provenance::FirstWaveProportional
        );
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let (mut s, truth) = small_session(Strategy::Neyman, IntervalMethod::Lai);
        for _ in 0..3 {
            s.next_allocation().unwrap();
            let r = answer(&s, &truth);
            s.record_wave(&r).unwrap();
        }
        s.next_allocation().unwrap();
        let text = s.to_json().unwrap();
        let back = SessionState::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (s, _) = small_session(Strategy::Random, IntervalMethod::Lai);
        let text =
            s.to_json()
                .unwrap()
                .replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        assert!(matches!(
            SessionState::from_json(&text),
            Err(EngineError::Version { found: 99 })
        ));
    }
}
