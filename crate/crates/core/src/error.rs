//! Error type shared by all modules.

use thiserror::Error;

/// Errors produced by library operations and the experiment harness.
#[derive(Debug, Error)]
pub enum ShivaError {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes or lengths of related values disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A caller broke an API contract (stale cache, missing path gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Config file could not be parsed or contains unknown/invalid keys.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ShivaError>;

impl ShivaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ShivaError::InvalidArgument(msg.into())
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        ShivaError::DimensionMismatch(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        ShivaError::Contract(msg.into())
    }
}
