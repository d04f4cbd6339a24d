use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm has no running statistics; run a train-mode pass first")]
    NoRunningStats,

    #[error("network spec invalid at layer {index}: {reason}")]
    Spec { index: usize, reason: String },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: clean={clean}, adversarial={adversarial:?}, distortion={distortion:?}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        clean: f32,
        adversarial: Option<f32>,
        distortion: Option<Vec<f32>>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Spec { .. })
    }
}
