use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WmuError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WmuError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WmuError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        WmuError::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = WmuError> = std::result::Result<T, E>;
