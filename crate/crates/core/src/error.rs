use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
///
/// The variants fall into the coarse classes reported by [`Error::class`],
/// which the command-line driver maps onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value at iteration {iteration} (epoch {epoch}): {detail}")]
    NonFinite {
        iteration: usize,
        epoch: usize,
        detail: String,
    },
    #[error("checkpoint config digest mismatch: file has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes; stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::DigestMismatch { .. } => {
                ErrorClass::Config
            }
            Error::NonFinite { .. } => ErrorClass::Numeric,
            Error::InvalidShape(_)
            | Error::ShapeMismatch(_)
            | Error::Data(_)
            | Error::State(_)
            | Error::Io { .. } => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
