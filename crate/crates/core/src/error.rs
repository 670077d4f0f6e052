use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VhdaError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error in dialog {dialog_id:?}, turn {turn_index:?}: {message}")]
    Parse {
        dialog_id: Option<String>,
        turn_index: Option<usize>,
        message: String,
    },

    #[error("schema error in dialog {dialog_id:?}: {message}")]
    Schema { dialog_id: Option<String>, message: String },

    #[error("empty sequence passed to a sequence encoder")]
    EmptySequence,

    #[error("index {index} out of range (size {size}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("latent chain order violated: level {level} requires {missing}")]
    ChainOrder { level: &'static str, missing: &'static str },

    #[error("width mismatch: expected {expected}, got {actual} ({what})")]
    Width {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("training diverged at step {step}: {report}")]
    Diverged { step: u64, report: String },
}

pub type Result<T> = std::result::Result<T, VhdaError>;

impl VhdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VhdaError::Io {
            path: path.into(),
            source,
        }
    }
}
