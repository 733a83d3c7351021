use thiserror::Error;

pub type Result<T> = std::result::Result<T, BrsError>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum BrsError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampler aborted at iteration {iteration} in block '{block}': {message}")]
    SamplerAbort {
        iteration: usize,
        block: String,
        message: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("replication timed out after {0:.1}s")]
    Timeout(f64),

    #[error("study error: {0}")]
    Study(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
