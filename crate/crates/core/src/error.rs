//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CeilError {
    /// Bad CLI usage or invalid configuration values.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// Violated operation contract (caller bug).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Non-finite values or diverged optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CeilError {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CeilError::Config(_) | CeilError::Contract(_) => 1,
            CeilError::Data(_) | CeilError::Io { .. } => 2,
            CeilError::Numerical(_) => 3,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CeilError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CeilError>;
