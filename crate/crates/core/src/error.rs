use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum SgdaError {
    /// A configuration value is missing, out of range, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation received input that violates its contract.
    #[error("invalid input: {0}")]
    Input(String),
    /// A formula references a signal that the trajectory does not provide.
    #[error("unknown signal `{0}`")]
    UnknownSignal(String),
    #[error("formula parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SgdaError {
    pub fn config(msg: impl Into<String>) -> Self {
        SgdaError::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        SgdaError::Input(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SgdaError>;
