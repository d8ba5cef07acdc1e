use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),

    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),

    #[error("invalid utterance {id:?}: {message}")]
    InvalidUtterance { id: String, message: String },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("bad magic in feature file {0}")]
    BadMagic(PathBuf),

    #[error("truncated feature file {0}")]
    Truncated(PathBuf),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("oracle requires transcripts (missing for {0:?})")]
    MissingTranscript(String),

    #[error("missing word alignment for {0:?}")]
    MissingAlignment(String),

    #[error("no usable training pairs")]
    NoUsablePairs,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
