//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FmsError>;

#[derive(Debug, Error)]
pub enum FmsError {
    /// A tape primitive was fed tensors with incompatible shapes.
    #[error("shape mismatch in `{op}`: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// Cholesky factorization failed even after escalating jitter.
    #[error("kernel not positive definite (max attempted jitter {attempted_jitter:.3e})")]
    NotPositiveDefinite { attempted_jitter: f64 },

    /// Backward was requested on a tape that has no recorded forward value.
    #[error("backward called before forward value exists for the requested output")]
    BackwardBeforeForward,

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// A checkpoint's arrays disagree with its architecture descriptor.
    #[error("checkpoint layer {layer}: {details}")]
    BadLayer { layer: usize, details: String },

    #[error("benchmark table error: {0}")]
    Benchmark(String),

    /// A prior partial hub generation used a different spec.
    #[error("hub spec hash mismatch in {dir}: expected {expected}, found {found}; use a clean directory")]
    SpecHashMismatch {
        dir: String,
        expected: String,
        found: String,
    },

    #[error("no candidates available for proposal")]
    NoCandidates,

    #[error("unknown method id `{0}`")]
    UnknownMethod(String),

    #[error("surrogate state file error: {0}")]
    StateFormat(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
