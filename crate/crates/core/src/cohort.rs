//! Patient pool, stratification and synthetic scenario generators.
//!
//! A [`Cohort`] is the set of algorithm-positive patients a validation study
//! draws from. Each row carries one continuous covariate which is cut into
//! strata by a [`StratumSpec`]. The generators in this module build synthetic
//! cohorts and hidden reference labels for simulation studies; all of them are
//! pure functions of their configuration and seed.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervals::beta_quantile;
use crate::rng::{rng_for, tag};

/// Lower and upper clamp for linked per-stratum success probabilities.
pub const PROB_FLOOR: f64 = 0.001;
pub const PROB_CEIL: f64 = 0.999;

const LINK_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("covariate {value} outside stratification range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("invalid stratum spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("cannot build linked probabilities for ppv={ppv}, sd={sd}")]
    Infeasible { ppv: f64, sd: f64 },
    #[error("duplicate patient id {0:?}")]
    DuplicateId(String),
    #[error("inconsistent cohort row {row}: {reason}")]
    Inconsistent { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Cut points for a single continuous covariate.
///
/// Intervals are left-closed and right-open, except the last one which also
/// contains the right end point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    boundaries: Vec<f64>,
    labels: Vec<String>,
}

impl StratumSpec {
    pub fn new(boundaries: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self, CohortError> {
        if boundaries.len() < 2 {
            return Err(CohortError::InvalidSpec(
                "need at least two boundaries".into(),
            ));
        }
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(CohortError::InvalidSpec("non-finite boundary".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CohortError::InvalidSpec(
                "boundaries must be strictly increasing".into(),
            ));
        }
        let m = boundaries.len() - 1;
        let labels = match labels {
            Some(l) if l.len() != m => {
                return Err(CohortError::InvalidSpec(format!(
                    "{} labels for {m} strata",
                    l.len()
                )))
            }
            Some(l) => l,
            None => boundaries
                .windows(2)
                .enumerate()
                .map(|(s, w)| {
                    let close = if s + 1 == m { ']' } else { ')' };
                    format!("[{},{}{close}", w[0], w[1])
                })
                .collect(),
        };
        Ok(Self { boundaries, labels })
    }

    /// `m` equal-width strata over `[lo, hi]`.
    pub fn equal_width(lo: f64, hi: f64, m: usize) -> Result<Self, CohortError> {
        if m == 0 {
            return Err(CohortError::InvalidSpec("m must be at least 1".into()));
        }
        let step = (hi - lo) / m as f64;
        let mut cuts: Vec<f64> = (0..m).map(|i| lo + step * i as f64).collect();
        cuts.push(hi);
        // Round away representation noise so labels read 0.1, 0.2, ...
        for c in cuts.iter_mut() {
            *c = (*c * 1e12).round() / 1e12;
        }
        Self::new(cuts, None)
    }

    /// Five strata `[0,0.1), [0.1,0.2), [0.2,0.3), [0.3,0.4), [0.4,0.5]`.
    pub fn frailty() -> Self {
        Self::new(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], None).expect("static spec")
    }

    pub fn m(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn lower(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn upper(&self) -> f64 {
        self.boundaries[self.m()]
    }

    pub fn stratify(&self, covariate: f64) -> Result<usize, CohortError> {
        stratify(covariate, self)
    }
}

/// Index of the stratum containing `covariate`.
pub fn stratify(covariate: f64, spec: &StratumSpec) -> Result<usize, CohortError> {
    let (lo, hi) = (spec.lower(), spec.upper());
    if !(covariate >= lo && covariate <= hi) {
        return Err(CohortError::OutOfRange {
            value: covariate,
            lo,
            hi,
        });
    }
    let m = spec.m();
    // Number of interior cut points <= covariate.
    let s = spec.boundaries[1..m].partition_point(|&b| b <= covariate);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub covariate: f64,
    pub stratum: usize,
    pub reviewed: bool,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    rows: Vec<PatientRow>,
    spec: StratumSpec,
}

impl Cohort {
    /// Build a cohort of unreviewed patients, assigning strata from covariates.
    pub fn from_covariates(
        ids: Vec<String>,
        covariates: &[f64],
        spec: StratumSpec,
    ) -> Result<Self, CohortError> {
        if ids.len() != covariates.len() {
            return Err(CohortError::InvalidConfig(format!(
                "{} ids for {} covariates",
                ids.len(),
                covariates.len()
            )));
        }
        let rows = ids
            .into_iter()
            .zip(covariates)
            .map(|(patient_id, &covariate)| {
                Ok(PatientRow {
                    patient_id,
                    covariate,
                    stratum: spec.stratify(covariate)?,
                    reviewed: false,
                    label: None,
                })
            })
            .collect::<Result<Vec<_>, CohortError>>()?;
        Self::from_rows(rows, spec)
    }

    /// Wrap existing rows, checking every row invariant.
    pub fn from_rows(rows: Vec<PatientRow>, spec: StratumSpec) -> Result<Self, CohortError> {
        let cohort = Self { rows, spec };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let mut seen = HashSet::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            if !seen.insert(row.patient_id.as_str()) {
                return Err(CohortError::DuplicateId(row.patient_id.clone()));
            }
            let expect = self.spec.stratify(row.covariate)?;
            if expect != row.stratum {
                return Err(CohortError::Inconsistent {
                    row: i,
                    reason: format!("stratum {} but covariate maps to {expect}", row.stratum),
                });
            }
            if row.reviewed != row.label.is_some() {
                return Err(CohortError::Inconsistent {
                    row: i,
                    reason: "label must be present iff reviewed".into(),
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> &[PatientRow] {
        &self.rows
    }

    pub fn spec(&self) -> &StratumSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn stratum_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.spec.m()];
        for row in &self.rows {
            sizes[row.stratum] += 1;
        }
        sizes
    }

    pub fn stratum_proportions(&self) -> Vec<f64> {
        let n = self.rows.len().max(1) as f64;
        self.stratum_sizes()
            .into_iter()
            .map(|c| c as f64 / n)
            .collect()
    }

    /// Unreviewed row indices per stratum, in row order.
    pub fn unreviewed_by_stratum(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.spec.m()];
        for (i, row) in self.rows.iter().enumerate() {
            if !row.reviewed {
                out[row.stratum].push(i);
            }
        }
        out
    }

    pub(crate) fn mark_reviewed(&mut self, row: usize, label: bool) {
        let r = &mut self.rows[row];
        r.reviewed = true;
        r.label = Some(label);
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CohortError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["patient_id", "covariate", "stratum", "reviewed", "label"])?;
        for row in &self.rows {
            let label = match row.label {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            w.write_record([
                row.patient_id.as_str(),
                &row.covariate.to_string(),
                &row.stratum.to_string(),
                if row.reviewed { "true" } else { "false" },
                label,
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Read the CSV produced by [`Cohort::write_csv`] (the stratum column is
    /// checked against `spec`), or a bare `patient_id,covariate` table, which
    /// is stratified on load.
    pub fn read_csv<R: Read>(reader: R, spec: StratumSpec) -> Result<Self, CohortError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().eq(["patient_id", "covariate"]) {
            let (mut ids, mut cov) = (Vec::new(), Vec::new());
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                let c: f64 = rec[1]
                    .trim()
                    .parse()
                    .map_err(|_| CohortError::Inconsistent {
                        row: i,
                        reason: format!("bad covariate {:?}", &rec[1]),
                    })?;
                ids.push(rec[0].to_string());
                cov.push(c);
            }
            return Self::from_covariates(ids, &cov, spec);
        }
        let expected = ["patient_id", "covariate", "stratum", "reviewed", "label"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(CohortError::InvalidConfig(format!(
                "unexpected cohort header {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |reason: String| CohortError::Inconsistent { row: i, reason };
            let covariate: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad covariate {:?}", &rec[1])))?;
            let stratum: usize = rec[2]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad stratum {:?}", &rec[2])))?;
            let reviewed = match rec[3].trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(bad(format!("bad reviewed flag {other:?}"))),
            };
            let label = match rec[4].trim() {
                "" => None,
                "1" | "true" => Some(true),
                "0" | "false" => Some(false),
                other => return Err(bad(format!("bad label {other:?}"))),
            };
            rows.push(PatientRow {
                patient_id: rec[0].to_string(),
                covariate,
                stratum,
                reviewed,
                label,
            });
        }
        Self::from_rows(rows, spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Skew {
    Left,
    #[default]
    Balanced,
    Right,
}

impl Skew {
    /// Beta shape parameters used for the scaled covariate.
    pub fn beta_shape(self) -> (f64, f64) {
        match self {
            Skew::Left => (1.0, 4.0),
            Skew::Balanced => (1.0, 1.0),
            Skew::Right => (4.0, 1.0),
        }
    }
}

/// How per-stratum success probabilities are chosen in linked scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkageMode {
    /// Fixed centred pattern; cohort PPV and across-stratum sd hit their
    /// targets exactly.
    #[default]
    Exact,
    /// Each stratum probability drawn independently around the target PPV with
    /// the given sd, so both only hold in expectation and the cohort PPV varies
    /// from one repetition to the next.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub ppv: f64,
    #[serde(default)]
    pub linkage_sd: f64,
    #[serde(default)]
    pub linkage_mode: LinkageMode,
    #[serde(default)]
    pub skew: Skew,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn nonlinked(n: usize, ppv: f64, seed: u64) -> Self {
        Self {
            n,
            ppv,
            linkage_sd: 0.0,
            linkage_mode: LinkageMode::Exact,
            skew: Skew::Balanced,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.n == 0 {
            return Err(CohortError::InvalidConfig("n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ppv) {
            return Err(CohortError::InvalidConfig(format!(
                "ppv {} outside [0, 1]",
                self.ppv
            )));
        }
        if !(self.linkage_sd >= 0.0 && self.linkage_sd.is_finite()) {
            return Err(CohortError::InvalidConfig(format!(
                "linkage_sd {} must be finite and >= 0",
                self.linkage_sd
            )));
        }
        Ok(())
    }

    pub fn is_linked(&self) -> bool {
        self.linkage_sd > 0.0
    }
}

/// Synthetic cohort with covariates drawn from a Beta distribution scaled to
/// the stratification range.
///
/// Draws are stratified on the probability scale: patient `i` receives the
/// Beta quantile of a uniform point inside the `i`-th of `n` equal cells,
/// and the cell order is shuffled. Stratum counts then track their expected
/// shares to within one patient.
pub fn gen_cohort(cfg: &ScenarioConfig, spec: &StratumSpec) -> Result<Cohort, CohortError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, &[tag("cohort")]);
    let (a, b) = cfg.skew.beta_shape();
    let (lo, hi) = (spec.lower(), spec.upper());
    let n = cfg.n;

    let mut cells: Vec<usize> = (0..n).collect();
    cells.shuffle(&mut rng);
    let covariates: Vec<f64> = cells
        .iter()
        .map(|&cell| {
            let u = (cell as f64 + rng.random::<f64>()) / n as f64;
            let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            let x = beta_quantile(a, b, u).unwrap_or(u);
            (lo + (hi - lo) * x).clamp(lo, hi)
        })
        .collect();
    let width = n.to_string().len().max(5);
    let ids = (1..=n).map(|i| format!("P{i:0width$}")).collect();
    Cohort::from_covariates(ids, &covariates, spec.clone())
}

/// Hidden reference labels for a simulated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    /// One label per cohort row, in row order.
    pub labels: Vec<bool>,
    /// Success probability used in each stratum.
    pub stratum_probabilities: Vec<f64>,
}

impl TruthTable {
    pub fn ppv(&self) -> f64 {
        let n = self.labels.len().max(1) as f64;
        self.labels.iter().filter(|&&y| y).count() as f64 / n
    }
}

fn draw_labels(cohort: &Cohort, probs: &[f64], seed: u64) -> Vec<bool> {
    let mut rng = rng_for(seed, &[tag("labels")]);
    cohort
        .rows()
        .iter()
        .map(|row| {
            let p = probs[row.stratum].clamp(0.0, 1.0);
            Bernoulli::new(p).expect("p in [0,1]").sample(&mut rng)
        })
        .collect()
}

pub fn gen_labels_nonlinked(
    cohort: &Cohort,
    ppv: f64,
    seed: u64,
) -> Result<TruthTable, CohortError> {
    if !(0.0..=1.0).contains(&ppv) {
        return Err(CohortError::InvalidConfig(format!(
            "ppv {ppv} outside [0, 1]"
        )));
    }
    let probs = vec![ppv; cohort.spec().m()];
    Ok(TruthTable {
        labels: draw_labels(cohort, &probs, seed),
        stratum_probabilities: probs,
    })
}

/// Labels whose success probability differs by stratum, with the cohort
/// (stratum-size weighted) PPV equal to `ppv` and the unweighted sample sd of
/// the per-stratum probabilities equal to `linkage_sd`.
pub fn gen_labels_linked(
    cohort: &Cohort,
    ppv: f64,
    linkage_sd: f64,
    seed: u64,
) -> Result<TruthTable, CohortError> {
    let probs = linked_probabilities(&cohort.stratum_proportions(), ppv, linkage_sd)?;
    Ok(TruthTable {
        labels: draw_labels(cohort, &probs, seed),
        stratum_probabilities: probs,
    })
}

/// Linked labels with per-stratum probabilities drawn at random, see
/// [`LinkageMode::Sampled`].
pub fn gen_labels_sampled(
    cohort: &Cohort,
    ppv: f64,
    linkage_sd: f64,
    seed: u64,
) -> Result<TruthTable, CohortError> {
    if !(0.0..=1.0).contains(&ppv) || !(linkage_sd >= 0.0) {
        return Err(CohortError::InvalidConfig(format!(
            "ppv {ppv} / linkage_sd {linkage_sd} out of range"
        )));
    }
    let mut rng = rng_for(seed, &[tag("stratum-probabilities")]);
    let probs: Vec<f64> = (0..cohort.spec().m())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (ppv + linkage_sd * z).clamp(PROB_FLOOR, PROB_CEIL)
        })
        .collect();
    Ok(TruthTable {
        labels: draw_labels(cohort, &probs, seed),
        stratum_probabilities: probs,
    })
}

/// Dispatch on the scenario's linkage settings.
pub fn gen_labels(
    cohort: &Cohort,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<TruthTable, CohortError> {
    cfg.validate()?;
    if !cfg.is_linked() {
        return gen_labels_nonlinked(cohort, cfg.ppv, seed);
    }
    match cfg.linkage_mode {
        LinkageMode::Exact => gen_labels_linked(cohort, cfg.ppv, cfg.linkage_sd, seed),
        LinkageMode::Sampled => gen_labels_sampled(cohort, cfg.ppv, cfg.linkage_sd, seed),
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn weighted_mean(xs: &[f64], w: &[f64]) -> f64 {
    xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / w.iter().sum::<f64>()
}

/// Per-stratum probabilities `clamp(a + b·c_s)` where `c_s` is the equally
/// spaced centred pattern with unit sample sd. `a` is solved so the weighted
/// mean hits `ppv`; `b` starts at `linkage_sd` and is rescaled whenever the
/// clamp shrinks the realised sd.
pub fn linked_probabilities(
    weights: &[f64],
    ppv: f64,
    linkage_sd: f64,
) -> Result<Vec<f64>, CohortError> {
    let m = weights.len();
    let infeasible = || CohortError::Infeasible {
        ppv,
        sd: linkage_sd,
    };
    if m == 0 || weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(CohortError::InvalidConfig("bad stratum weights".into()));
    }
    if !(linkage_sd >= 0.0 && linkage_sd.is_finite()) {
        return Err(infeasible());
    }
    if linkage_sd == 0.0 {
        if !(0.0..=1.0).contains(&ppv) {
            return Err(infeasible());
        }
        return Ok(vec![ppv; m]);
    }
    if m < 2 || !(ppv > PROB_FLOOR && ppv < PROB_CEIL) {
        return Err(infeasible());
    }

    let centre = (m as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..m).map(|s| s as f64 - centre).collect();
    let unit = sample_sd(&raw);
    let pattern: Vec<f64> = raw.iter().map(|c| c / unit).collect();
    let (cmin, cmax) = (pattern[0], pattern[m - 1]);

    let build = |a: f64, b: f64| -> Vec<f64> {
        pattern
            .iter()
            .map(|c| (a + b * c).clamp(PROB_FLOOR, PROB_CEIL))
            .collect()
    };
    // Weighted mean is non-decreasing in `a`; bisect for the offset.
    let solve_offset = |b: f64| -> f64 {
        let (mut lo, mut hi) = (PROB_FLOOR - b * cmax, PROB_CEIL - b * cmin);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if weighted_mean(&build(mid, b), weights) < ppv {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    };

    let mut b = linkage_sd;
    for _ in 0..LINK_MAX_ITER {
        let a = solve_offset(b);
        let p = build(a, b);
        let sd = sample_sd(&p);
        let mean = weighted_mean(&p, weights);
        if (sd - linkage_sd).abs() < 1e-12 && (mean - ppv).abs() < 1e-12 {
            return Ok(p);
        }
        if sd <= 0.0 {
            break;
        }
        b *= linkage_sd / sd;
    }
    Err(infeasible())
}
