use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {}", .keys.join(", "))]
    Config { keys: Vec<String> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image decode failed for {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("weights: {0}")]
    Weights(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, batch {batch_ids:?})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
