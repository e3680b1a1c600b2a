use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: index {index} out of range for size {size}")]
    OutOfRange { op: &'static str, index: usize, size: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("synthetic language: {0}")]
    Synth(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidConfig { field, message: message.into() }
    }
}
