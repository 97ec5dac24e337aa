use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("sample out of storable range: {0}")]
    SampleOutOfRange(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("frame count must be even, got {0}")]
    OddFrameCount(usize),

    #[error("bad header in {path}: {reason}")]
    InvalidHeader { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::InvalidHeader {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
