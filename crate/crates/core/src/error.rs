use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max abs asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance matrix is singular even after repair and jitter")]
    SingularCovariance,

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("summary `{label}` has non-positive log-shift argument {value}; increase nu")]
    LogShift { label: String, value: f64 },

    #[error("particle filter degenerate at observation {step}: every weight is zero")]
    FilterDegenerate { step: usize },

    #[error("regression design matrix is singular")]
    SingularDesign,

    #[error("starting point is not finite")]
    NonFiniteStart,

    #[error("empty sample")]
    EmptySample,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
