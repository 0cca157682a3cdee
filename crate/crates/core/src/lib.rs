//! Diabetic retinopathy staging pipeline.
//!
//! The crate is organized around the stages of a staging experiment:
//!
//! - [`ingest`]: dataset manifests, exclusion rules, referable-DR labels, and
//!   leakage-free single-source / multi-source training plans.
//! - [`preprocess`]: the deterministic crop / pad / resize chain, training-time
//!   augmentations, and the preprocessing cache.
//! - [`model`]: a transformer backbone with per-block attention capture, a
//!   two-layer regression head, and checkpoint I/O.
//! - [`train`]: the fine-tuning harness (AdamW, plateau scheduler, early
//!   stopping, best-checkpoint selection) and end-to-end experiment runs.
//! - [`explain`]: gradient-weighted attention rollout and the plain rollout
//!   baseline, rendered as heatmaps.
//! - [`metrics`]: staging and referable-DR metrics, bootstrap intervals,
//!   Mann-Whitney significance testing, and extreme-error flagging.
//! - [`synth`]: synthetic desk-scale datasets used by tests and demos.

pub mod error;
pub mod explain;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
