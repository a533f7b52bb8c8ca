use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FannError>;

#[derive(Debug, Error)]
pub enum FannError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("network junction `{junction}`: {reason}")]
    Junction { junction: String, reason: String },

    #[error("{path}: {reason} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("evaluation protocol: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FannError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FannError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        FannError::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
