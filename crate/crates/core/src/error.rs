//! Error type shared by every estimator and test in the crate.

use thiserror::Error;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Degenerate,
}

#[derive(Debug, Error)]
pub enum SurError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("inconsistent restriction: {0}")]
    InconsistentRestriction(String),
    #[error("rank deficient design: {0}")]
    RankDeficient(String),
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("exact fit: {0}")]
    ExactFit(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("singular resample")]
    SingularResample,
    #[error("insufficient replicates: need at least {needed}, have {have}")]
    InsufficientReplicates { needed: usize, have: usize },
    #[error("degenerate bootstrap: {0}")]
    DegenerateBootstrap(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("regularization failure: {0}")]
    RegularizationFailure(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SurError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SurError::InvalidInput(_)
            | SurError::DimensionMismatch(_)
            | SurError::InconsistentRestriction(_)
            | SurError::InsufficientReplicates { .. }
            | SurError::Io(_) => ErrorCategory::Config,
            SurError::NumericFailure(_) | SurError::RegularizationFailure(_) => {
                ErrorCategory::Numeric
            }
            SurError::RankDeficient(_)
            | SurError::SingularCovariance(_)
            | SurError::ExactFit(_)
            | SurError::DegenerateDesign(_)
            | SurError::SingularResample
            | SurError::DegenerateBootstrap(_) => ErrorCategory::Degenerate,
        }
    }
}

pub type Result<T> = std::result::Result<T, SurError>;
