//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by schedule construction, model evaluation, training and
/// persistence.
#[derive(Debug, Error)]
pub enum BcmError {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A vector or tensor had the wrong length.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An index-pair distribution had no valid second index.
    #[error("degenerate pmf: {0}")]
    DegeneratePmf(String),

    /// The training loss or a parameter became non-finite.
    #[error("non-finite value at iteration {iter}: {what}")]
    NonFinite { iter: u64, what: String },

    /// A training run stopped on a non-finite value; the failing batch rides
    /// along as CSV for offline inspection.
    #[error("training aborted at iteration {iter}: {what}")]
    TrainAbort { iter: u64, what: String, batch_csv: String },

    /// Checkpoint bytes do not match the checksum in the sidecar manifest.
    #[error("checkpoint checksum mismatch: manifest {expected}, file {got}")]
    ChecksumMismatch { expected: String, got: String },

    /// A checkpoint or config file could not be decoded.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BcmError>;

impl BcmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        BcmError::InvalidArgument(msg.into())
    }
}
