use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at data row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("positivity violation: study {study} has no {arm} units")]
    Positivity { study: u32, arm: &'static str },

    #[error("unknown modifier `{0}`")]
    UnknownModifier(String),

    #[error("separation detected in {context} (|coefficient| exceeded {cap}); refit with ridge fallback enabled")]
    Separation { context: String, cap: f64 },

    #[error("weights did not converge: {0}")]
    NotConverged(String),

    #[error("degenerate overlap between study {study} and the target sample")]
    Overlap { study: u32 },

    #[error("weight vector of length {got} does not match {expected} study units")]
    Alignment { expected: usize, got: usize },

    #[error("degenerate arm {arm}: zero inverse-propensity mass")]
    DegenerateArm { arm: u8 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("R² is numerically 1; use the R² = 1 branch with the ideal-weight variance")]
    Branch,

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("bootstrap unreliable: {dropped} of {total} replicates dropped")]
    Reliability { dropped: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("oracle positivity violation at profile {profile}: {message}")]
    OraclePositivity { profile: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
