use thiserror::Error;

use crate::trainer::TrainTrace;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum GrwError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("rank-deficient input: smallest eigenvalue {lambda_min:e} vs largest {lambda_max:e}")]
    RankDeficient { lambda_min: f64, lambda_max: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("data is not linearly separable: {0}")]
    NotSeparable(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training hit a non-finite risk. The trace covers every epoch up to the failure.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: u64, trace: Box<TrainTrace> },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GrwError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GrwError {
    GrwError::InvalidArgument(msg.into())
}
