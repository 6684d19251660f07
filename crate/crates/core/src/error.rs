use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DawogError {
    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed table file {path}: {reason}")]
    TableFormat { path: PathBuf, reason: String },

    #[error("csv schema violation: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DawogError> = std::result::Result<T, E>;
