use thiserror::Error;

/// Errors raised by the numerical layers of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mixture weights invalid: {0}")]
    Weight(String),
    #[error("invalid quantum state: {0}")]
    State(String),
    #[error("invalid parameters: {0}")]
    Param(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("objective returned a non-finite value {value} at params {params:?}")]
    Optimization { value: f64, params: Vec<f64> },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("batching error: {0}")]
    Batching(String),
    #[error("audit error: {0}")]
    Audit(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("oracle search space of {candidates} candidates exceeds the guard of {guard}")]
    OracleTooLarge { candidates: u128, guard: u128 },
    #[error("correlation undefined: {0}")]
    Correlation(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("dataset file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
