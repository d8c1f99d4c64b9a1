use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmadError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("missing metric component: {0}")]
    MissingComponent(&'static str),

    #[error("vocabulary mismatch: checkpoint {checkpoint} vs dataset {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("gradient check aborted: {0}")]
    GradCheck(String),

    #[error("judge request failed: {0}")]
    Judge(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, LmadError>;

impl LmadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
