use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error in {context} at byte offset {offset}: {message}")]
    Parse {
        context: &'static str,
        offset: u64,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated {context}: {message}")]
    Truncated {
        context: &'static str,
        message: String,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
