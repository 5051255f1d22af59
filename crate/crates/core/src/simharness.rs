//! Replicated simulation experiments.
//!
//! An [`ExperimentSpec`] fixes a scenario, a stopping rule and a grid of
//! strategies and interval methods. Each (strategy, method, replication)
//! triple gets its own derived seed, so any single run can be reproduced in
//! isolation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{gen_cohort, gen_labels, Cohort, CohortError, ScenarioConfig, StratumSpec};
use crate::engine::{
    run_to_completion, EngineError, ReviewRecord, SessionConfig, SessionState, StopDecision,
    StopStatus, StoppingRule,
};
use crate::intervals::IntervalMethod;
use crate::raking::RakingConfig;
use crate::rng::{derive_seed, tag};
use crate::sampling::{SamplingPolicy, SdEstimator, SizeBasis, Strategy};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("experiment file version {found}, expected {EXPERIMENT_SCHEMA_VERSION}")]
    Version { found: u32 },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn default_repetitions() -> usize {
    100
}
fn default_batch() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.05
}
fn default_min_per_stratum() -> usize {
    10
}
fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_methods() -> Vec<IntervalMethod> {
    vec![IntervalMethod::Lai, IntervalMethod::Bayes]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub scenario: ScenarioConfig,
    pub rule: StoppingRule,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_methods")]
    pub methods: Vec<IntervalMethod>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_min_per_stratum")]
    pub min_per_stratum: usize,
    #[serde(default)]
    pub sd_estimator: SdEstimator,
    #[serde(default)]
    pub neyman_size_basis: SizeBasis,
    #[serde(default)]
    pub raking: RakingConfig,
    #[serde(default)]
    pub intersect_bands: bool,
    /// Stratum cut points; the frailty strata when absent.
    #[serde(default)]
    pub boundaries: Option<Vec<f64>>,
}

impl ExperimentSpec {
    pub fn new(scenario: ScenarioConfig, rule: StoppingRule) -> Self {
        Self {
            version: EXPERIMENT_SCHEMA_VERSION,
            name: String::new(),
            scenario,
            rule,
            strategies: default_strategies(),
            methods: default_methods(),
            repetitions: default_repetitions(),
            seed: 0,
            batch_size: default_batch(),
            alpha: default_alpha(),
            min_per_stratum: default_min_per_stratum(),
            sd_estimator: SdEstimator::default(),
            neyman_size_basis: SizeBasis::default(),
            raking: RakingConfig::default(),
            intersect_bands: false,
            boundaries: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = toml::from_str(text)?;
        if spec.version != EXPERIMENT_SCHEMA_VERSION {
            return Err(HarnessError::Version {
                found: spec.version,
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn strata(&self) -> Result<StratumSpec, HarnessError> {
        Ok(match &self.boundaries {
            Some(b) => StratumSpec::new(b.clone(), None)?,
            None => StratumSpec::frailty(),
        })
    }

    pub fn session_config(&self, strategy: Strategy, method: IntervalMethod) -> SessionConfig {
        let mut policy = SamplingPolicy::new(strategy, self.batch_size);
        policy.min_per_stratum = self.min_per_stratum;
        policy.sd_estimator = self.sd_estimator;
        policy.neyman_size_basis = self.neyman_size_basis;
        SessionConfig {
            policy,
            rule: self.rule.clone(),
            method,
            alpha: self.alpha,
            raking: self.raking.clone(),
            seed: 0,
            intersect_bands: self.intersect_bands,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::Invalid(m));
        if self.repetitions == 0 {
            return invalid("repetitions must be at least 1".into());
        }
        if self.strategies.is_empty() || self.methods.is_empty() {
            return invalid("need at least one strategy and one method".into());
        }
        self.scenario.validate()?;
        self.strata()?;
        for &m in &self.methods {
            if let Err(e) = self.session_config(Strategy::Random, m).validate() {
                return invalid(e.to_string());
            }
        }
        Ok(())
    }

    /// Seed of one replication: a stable hash of the base seed, the pair and
    /// the replication index.
    pub fn replication_seed(&self, strategy: Strategy, method: IntervalMethod, r: usize) -> u64 {
        derive_seed(
            self.seed,
            &[tag(strategy.name()), tag(method.name()), r as u64],
        )
    }
}

/// Outcome of one simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub strategy: Strategy,
    pub method: IntervalMethod,
    pub replication: usize,
    pub seed: u64,
    /// Cohort PPV of the drawn truth table.
    pub true_ppv: f64,
    pub decision: StopDecision,
    pub batches: usize,
}

/// Per-wave trace of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub wave: usize,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub k: usize,
    pub k_eff: f64,
    pub status: StopStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub method: IntervalMethod,
    pub replication: usize,
    pub seed: u64,
    pub rule: StoppingRule,
    pub true_ppv: f64,
    pub points: Vec<TrajectoryPoint>,
    pub stop: StopDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub method: IntervalMethod,
    pub prop_stopped: f64,
    pub prop_futility: f64,
    /// Mean stopping wave over stopped runs; `None` when none stopped.
    pub mean_batches: Option<f64>,
    pub batch_ci_low: Option<f64>,
    pub batch_ci_high: Option<f64>,
    pub repetitions: usize,
}

/// Drive one replication and keep the finished session.
pub fn run_one(
    spec: &ExperimentSpec,
    cohort: &Cohort,
    strategy: Strategy,
    method: IntervalMethod,
    replication: usize,
) -> Result<(SessionState, f64, u64), HarnessError> {
    let seed = spec.replication_seed(strategy, method, replication);
    let truth = gen_labels(cohort, &spec.scenario, derive_seed(seed, &[tag("labels")]))?;
    let config = spec
        .session_config(strategy, method)
        .with_seed(derive_seed(seed, &[tag("session")]));
    let mut session = SessionState::create(config, cohort.clone())?;
    run_to_completion(&mut session, &truth.labels)?;
    Ok((session, truth.ppv(), seed))
}

fn outcome(
    strategy: Strategy,
    method: IntervalMethod,
    replication: usize,
    (session, true_ppv, seed): (SessionState, f64, u64),
) -> RunOutcome {
    RunOutcome {
        strategy,
        method,
        replication,
        seed,
        true_ppv,
        batches: session.wave(),
        decision: session.status,
    }
}

/// Every run of the experiment, ordered by (strategy, method, replication).
pub fn run_all(spec: &ExperimentSpec) -> Result<Vec<RunOutcome>, HarnessError> {
    spec.validate()?;
    let cohort = gen_cohort(&spec.scenario, &spec.strata()?)?;
    let jobs: Vec<(Strategy, IntervalMethod, usize)> = spec
        .strategies
        .iter()
        .flat_map(|&s| {
            spec.methods
                .iter()
                .flat_map(move |&m| (0..spec.repetitions).map(move |r| (s, m, r)))
        })
        .collect();
    jobs.into_par_iter()
        .map(|(s, m, r)| Ok(outcome(s, m, r, run_one(spec, &cohort, s, m, r)?)))
        .collect()
}

/// Aggregate the runs of one (strategy, method) pair.
pub fn summarize(strategy: Strategy, method: IntervalMethod, runs: &[&RunOutcome]) -> SummaryRow {
    let n = runs.len() as f64;
    let stopped: Vec<f64> = runs
        .iter()
        .filter(|r| r.decision.status.is_stopped())
        .map(|r| r.batches as f64)
        .collect();
    let futile = runs
        .iter()
        .filter(|r| r.decision.status == StopStatus::StopFutility)
        .count();
    let (mean, lo, hi) = if stopped.is_empty() {
        (None, None, None)
    } else {
        let k = stopped.len() as f64;
        let mean = stopped.iter().sum::<f64>() / k;
        let se = if stopped.len() > 1 {
            let var = stopped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        } else {
            0.0
        };
        (Some(mean), Some(mean - 1.96 * se), Some(mean + 1.96 * se))
    };
    SummaryRow {
        strategy,
        method,
        prop_stopped: stopped.len() as f64 / n,
        prop_futility: futile as f64 / n,
        mean_batches: mean,
        batch_ci_low: lo,
        batch_ci_high: hi,
        repetitions: runs.len(),
    }
}

/// One summary row per (strategy, method) pair, in spec order.
pub fn summarize_runs(spec: &ExperimentSpec, runs: &[RunOutcome]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &s in &spec.strategies {
        for &m in &spec.methods {
            let pair: Vec<&RunOutcome> = runs
                .iter()
                .filter(|r| r.strategy == s && r.method == m)
                .collect();
            rows.push(summarize(s, m, &pair));
        }
    }
    rows
}

pub fn run_replications(spec: &ExperimentSpec) -> Result<Vec<SummaryRow>, HarnessError> {
    let runs = run_all(spec)?;
    Ok(summarize_runs(spec, &runs))
}

/// Band trajectory of one replication.
pub fn emit_trajectory(
    spec: &ExperimentSpec,
    strategy: Strategy,
    method: IntervalMethod,
    replication: usize,
) -> Result<Trajectory, HarnessError> {
    spec.validate()?;
    let cohort = gen_cohort(&spec.scenario, &spec.strata()?)?;
    let (session, true_ppv, seed) = run_one(spec, &cohort, strategy, method, replication)?;
    Ok(trajectory_of(
        &session,
        strategy,
        method,
        replication,
        seed,
        true_ppv,
    ))
}

/// Per-wave trace of a finished (or running) session.
pub fn trajectory_of(
    session: &SessionState,
    strategy: Strategy,
    method: IntervalMethod,
    replication: usize,
    seed: u64,
    true_ppv: f64,
) -> Trajectory {
    let last = session.bands.len();
    let mut k = 0;
    let points = session
        .bands
        .iter()
        .zip(&session.waves)
        .enumerate()
        .map(|(i, (b, w))| {
            k += w.records.len();
            TrajectoryPoint {
                wave: i + 1,
                point: b.point,
                lower: b.lower,
                upper: b.upper,
                k,
                k_eff: b.k_eff,
                status: if i + 1 == last {
                    session.status.status
                } else {
                    StopStatus::Continue
                },
            }
        })
        .collect();
    Trajectory {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        strategy,
        method,
        replication,
        seed,
        rule: session.config.rule.clone(),
        true_ppv,
        points,
        stop: session.status.clone(),
    }
}

#[derive(Serialize)]
struct SummaryCsvRow<'a> {
    strategy: &'a str,
    method: &'a str,
    prop_stopped: f64,
    prop_futility: f64,
    mean_batches: Option<f64>,
    batch_ci_low: Option<f64>,
    batch_ci_high: Option<f64>,
    repetitions: usize,
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(SummaryCsvRow {
            strategy: r.strategy.name(),
            method: r.method.name(),
            prop_stopped: r.prop_stopped,
            prop_futility: r.prop_futility,
            mean_batches: r.mean_batches,
            batch_ci_low: r.batch_ci_low,
            batch_ci_high: r.batch_ci_high,
            repetitions: r.repetitions,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub schema_version: u32,
    pub experiment: String,
    pub rows: Vec<SummaryRow>,
}

pub fn summary_json(spec: &ExperimentSpec, rows: &[SummaryRow]) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(&SummaryDocument {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        experiment: spec.name.clone(),
        rows: rows.to_vec(),
    })?)
}

pub fn write_trajectory_csv<W: Write>(t: &Trajectory, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["wave", "point", "lower", "upper", "k", "k_eff", "status"])?;
    for p in &t.points {
        let status = serde_json::to_value(p.status)?;
        w.write_record([
            p.wave.to_string(),
            p.point.to_string(),
            p.lower.to_string(),
            p.upper.to_string(),
            p.k.to_string(),
            p.k_eff.to_string(),
            status.as_str().unwrap_or_default().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Labels for a pending wave taken from a truth table. Handy for driving a
/// session by hand in examples and tests.
pub fn oracle_records(session: &SessionState, truth: &[bool]) -> Vec<ReviewRecord> {
    session
        .pending
        .as_ref()
        .map(|p| {
            p.rows()
                .iter()
                .zip(&p.patient_ids)
                .map(|(&r, id)| ReviewRecord::new(id.clone(), truth[r]))
                .collect()
        })
        .unwrap_or_default()
}
