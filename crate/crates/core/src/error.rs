use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the probing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("caption is empty after normalization")]
    EmptyCaption,

    #[error("index {index} out of range for caption of {len} words")]
    BadIndex { index: usize, len: usize },

    #[error("no target word found in caption {0:?}")]
    NoTargetWord(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt dataset {path}: {malformed} of {total} rows malformed")]
    CorruptDataset {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("backend error: {message}")]
    Backend {
        message: String,
        /// Request/response lines exchanged with the backend, when available.
        transcript: Vec<String>,
    },

    #[error("backend lacks capability `{0}`")]
    Capability(&'static str),

    #[error("too many backend failures: {failed} of {total} samples")]
    TooManyBackendErrors { failed: usize, total: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn backend(message: impl Into<String>) -> Self {
        Error::Backend {
            message: message.into(),
            transcript: Vec::new(),
        }
    }

    /// Coarse category used by the command-line tool to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Backend { .. } | Error::Capability(_) | Error::TooManyBackendErrors { .. } => {
                ErrorKind::Backend
            }
            Error::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Backend,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
