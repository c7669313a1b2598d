use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum CimError {
    /// Tensor extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid hyperparameters or model/data configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// NaN/Inf encountered in a forward, backward or update step.
    #[error("numeric failure: {0}")]
    NonFinite(String),
    /// An input collection that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(String),
    /// Malformed or truncated binary file.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CimError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CimError::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CimError::Config(msg.into()))
}
