use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A persisted file could not be decoded. `offset` is a byte offset for
    /// binary files and a 1-based line number for line-oriented files.
    #[error("format error in {file} at {unit} {offset}: {message}")]
    Format {
        file: String,
        unit: &'static str,
        offset: u64,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("no embedding stored for {0}")]
    MissingKey(String),

    #[error("encoder fingerprint mismatch: casebase has {expected}, backend has {actual}")]
    Fingerprint { expected: String, actual: String },

    #[error("no case retrieved for question {0}")]
    NoCase(String),

    #[error("no candidate spans in passage {0}")]
    NoCandidates(String),

    #[error("failed to encode case {id}: {source}")]
    Build {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        file: impl Into<String>,
        unit: &'static str,
        offset: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            file: file.into(),
            unit,
            offset,
            message: message.into(),
        }
    }
}
