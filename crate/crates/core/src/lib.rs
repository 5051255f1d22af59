//! Adaptive multi-wave chart validation.
//!
//! A cohort flagged by a phenotype algorithm is partitioned into strata on a
//! continuous covariate. Reviewers label patients in waves; after each wave
//! the positive predictive value is re-estimated with an anytime-valid band
//! and the study stops as soon as the band clears a threshold.
//!
//! - [`cohort`]: strata, cohort tables and synthetic scenarios.
//! - [`sampling`]: per-wave allocation strategies.
//! - [`intervals`]: confidence sequences and credible intervals.
//! - [`raking`]: post-stratification weights and effective counts.
//! - [`engine`]: the stateful review session.
//! - [`forecast`]: predicted waves remaining.
//! - [`simharness`]: replicated simulation experiments.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod engine;
pub mod forecast;
pub mod intervals;
pub mod raking;
pub mod rng;
pub mod sampling;
pub mod simharness;

pub use cohort::{Cohort, ScenarioConfig, StratumSpec};
pub use engine::{
    evaluate_stopping, ReviewRecord, SessionConfig, SessionState, StopDecision, StopStatus,
    StoppingRule,
};
pub use intervals::{IntervalEstimate, IntervalMethod};
pub use sampling::{SamplingPolicy, Strategy, WaveAllocation};
