use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PbipError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed record {path}: {reason}")]
    Record { path: PathBuf, reason: String },

    #[error("no records found under {0}")]
    NoRecords(PathBuf),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("class '{0}' has no eligible single-class patches for the image bank")]
    EmptyClass(String),

    #[error("cannot form {k} clusters from {m} points; lower K")]
    TooFewPoints { m: usize, k: usize },

    #[error("empty label: no classes present")]
    EmptyLabel,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("external command failed: {0}")]
    Command(String),
}

pub type Result<T, E = PbipError> = std::result::Result<T, E>;

impl PbipError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PbipError::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for PbipError {
    fn from(e: serde_json::Error) -> Self {
        PbipError::Serde(e.to_string())
    }
}
