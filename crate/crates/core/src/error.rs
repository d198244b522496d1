use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum HgotError {
    /// Inconsistent or out-of-domain configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs violate an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// A dataset file could not be parsed or failed validation.
    #[error("{}:{line}: {message}", file.display())]
    Data {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or a solver breakdown that cannot be recovered.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An operation was invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
}

impl HgotError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HgotError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(file: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        HgotError::Data {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HgotError>;
