//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate sample_id `{sample_id}`")]
    DuplicateSampleId { sample_id: String },

    #[error("invalid record `{sample_id}`: {message}")]
    InvalidRecord { sample_id: String, message: String },

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("wrong image stage for {op}: expected {expected}, got {actual}")]
    WrongStage {
        op: &'static str,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("incompatible tensors: {}", .tensors.join(", "))]
    IncompatibleTensors { tensors: Vec<String> },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("heatmap geometry: {0}")]
    Geometry(String),

    #[error("kappa undefined: expected disagreement is zero")]
    UndefinedKappa,

    #[error("AUC undefined: reference labels contain a single class")]
    AucUndefined,

    #[error("degenerate variance: all values identical")]
    DegenerateVariance,

    #[error("bootstrap unreliable: {skipped} of {total} resamples skipped")]
    BootstrapUnreliable { skipped: usize, total: usize },

    #[error("backbone does not support attention tracing")]
    TraceUnsupported,

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
