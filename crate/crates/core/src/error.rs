use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` requires stage {missing}")]
    MissingStage { stage: String, missing: String },

    #[error("artifact for stage `{stage}` was produced with config hash {found}, current is {expected}; use --force to overwrite")]
    ConfigHashMismatch {
        stage: String,
        expected: String,
        found: String,
    },

    #[error("non-finite loss in stage `{stage}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        step: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row} ({path}): {reason}")]
    ManifestRow {
        row: usize,
        path: String,
        reason: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
