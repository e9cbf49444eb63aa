use thiserror::Error;

/// Errors raised by the filtering and dynamics routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("matrix is not positive definite after jitter up to {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("non-finite model state after {step} steps")]
    NonFiniteState { step: usize },

    #[error("observation noise covariance must be diagonal for serial processing")]
    NonDiagonalR,

    #[error("every particle weight underflowed; the filter has diverged")]
    AllWeightsZero,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;
