use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("attack failed at step {step}: {msg}")]
    Attack { step: usize, msg: String },
    #[error("fine-tune failed at step {step}: {msg}")]
    FineTune { step: usize, msg: String },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("feature extractor accuracy {accuracy:.3} below required {required:.3}")]
    ExtractorQuality { accuracy: f64, required: f64 },
    #[error("ingestion error in {file}: {msg}")]
    Ingestion { file: PathBuf, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Vocabulary(_) => "vocabulary",
            Error::Index { .. } => "index",
            Error::Training { .. } => "training",
            Error::Attack { .. } => "attack",
            Error::FineTune { .. } => "finetune",
            Error::Metric(_) => "metric",
            Error::ExtractorQuality { .. } => "extractor_quality",
            Error::Ingestion { .. } => "ingestion",
            Error::Checkpoint(_) => "checkpoint",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
