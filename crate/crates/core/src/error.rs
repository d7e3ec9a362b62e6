use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("training failed at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible calibration constraint (best achievable {objective} = {best})")]
    Infeasible { objective: &'static str, best: f64 },

    #[error("case sets differ: {0}")]
    CaseMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
