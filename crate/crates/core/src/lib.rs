//! Out-of-distribution detector evaluation toolkit.
//!
//! The crate works on classifier outputs that were computed upstream: penultimate
//! features `h`, logits `o = Wᵀh + b` and the last-layer weights. From an
//! in-distribution train split it fits the statistics needed by eleven
//! post-hoc detectors, scores ID-test and OOD sets, and turns the scores into
//! per-OOD-class FPR@TPR, AUROC and AUPR tables with mean and CDF aggregates.
//! It also generates the seventeen synthetic "unit-test" image suites that any
//! reasonable detector should reject.
//!
//! Modules, bottom-up:
//!
//! - [`arraystore`]: bit-exact matrix files and manifest-driven bundle loading.
//! - [`fitstats`]: train-set statistics ([`fitstats::FittedState`]).
//! - [`detectors`]: per-sample scores, higher means more in-distribution.
//! - [`metrics`]: thresholds, FPR/AUROC/AUPR and per-class reports.
//! - [`unitgen`]: seeded synthetic image suites written as PNG.
//! - [`cli`]: the `oodeval` command line.

pub mod arraystore;
pub mod cli;
pub mod detectors;
mod error;
pub mod fitstats;
pub mod linalg;
pub mod metrics;
pub mod reduce;
pub mod unitgen;

pub use error::{Error, Result};
