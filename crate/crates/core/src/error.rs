use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SieveError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SieveError {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown key: {0}")]
    Key(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("embedding space mismatch: {left} vs {right}")]
    SpaceMismatch { left: String, right: String },

    #[error("unpaired item: {0}")]
    Pairing(String),

    #[error("stage order violated: {0}")]
    StageOrder(String),
}

impl SieveError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SieveError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        SieveError::Json {
            path: path.into(),
            source,
        }
    }
}
