use thiserror::Error;

/// Errors raised by the filter, the models and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("every log-weight is -inf")]
    AllWeightsDegenerate,

    #[error("log-weight is NaN at index {0}")]
    NanWeight(usize),

    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),

    #[error("full mixture resampling with N={n} exceeds the cap of {cap} particles")]
    CapExceeded { n: usize, cap: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("telescoping audit failed: lhs={lhs}, rhs={rhs}")]
    AuditFailed { lhs: f64, rhs: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParams(_) | Error::SchemaMismatch(_) => 2,
            Error::Io(_) | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
