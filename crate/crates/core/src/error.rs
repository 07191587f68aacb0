use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("array dimension must be at least 1")]
    EmptyArray,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("processing element ({row}, {col}) is outside a {n}x{n} array")]
    PeOutOfRange { row: usize, col: usize, n: usize },
    #[error("inconsistent activity event at cycle {cycle}: {reason}")]
    InconsistentEvent { cycle: usize, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular covariance after regularization up to {0:e}")]
    SingularCovariance(f64),
    #[error("trace file format: {0}")]
    Format(String),
    #[error("unsupported trace file version {found:?}")]
    Version { found: String },
    #[error("refusing to overwrite existing file {0}")]
    Exists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
