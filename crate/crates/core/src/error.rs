use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label {index} for {num_classes} classes")]
    Label { index: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },

    #[error("training diverged at step {}: {report:?}", report.step)]
    Diverged { report: Box<LossReport> },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
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
