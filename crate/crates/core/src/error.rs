use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator's fallible operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid range config: {0}")]
    InvalidRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate denominator in {0}")]
    DegenerateDenominator(&'static str),

    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("sweep spec: {0}")]
    SweepSpec(String),

    #[error("unexpected overflow: {0} FP16 accumulator overflow events")]
    UnexpectedOverflow(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
