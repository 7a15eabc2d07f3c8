use thiserror::Error;

/// Errors produced by the emulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A linear-algebra operation failed beyond recovery (e.g. a covariance
    /// matrix that stays indefinite after jitter escalation).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Hyperparameter estimation failed in every restart.
    #[error("fitting failed: {0}")]
    Fitting(String),

    /// The target function has (numerically) zero variance, so variance
    /// ratios are undefined.
    #[error("degenerate function: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
