use thiserror::Error;

/// Errors raised by the verification laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("extractor table is not certified: {0}")]
    Uncertified(String),

    #[error("no certified table found after {attempts} attempts (n={n_in}, m={m_out})")]
    SearchExhausted {
        n_in: u32,
        m_out: u32,
        attempts: u64,
    },

    #[error("dimension guard exceeded: {dim} > {limit}")]
    TooLarge { dim: usize, limit: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
