use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: cannot encode image: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension error in {stage}: {message}")]
    Dimension { stage: &'static str, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite value in `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint {path} does not match the run configuration: {message}")]
    SpecMismatch { path: PathBuf, message: String },
    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Dimension { stage, message: message.into() }
    }

    /// Short category name, stable across releases; the CLI maps it to an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Decode { .. } | Error::Encode { .. } | Error::Format { .. } => "format",
            Error::InvalidImage(_) | Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::NonFinite { .. } => "numeric",
            Error::Checkpoint { .. } | Error::SpecMismatch { .. } => "checkpoint",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
