use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dinvmark_core::Error),
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {found} frames, need at least {needed}")]
    TooFewFrames {
        path: PathBuf,
        found: usize,
        needed: usize,
    },
    #[error("corrupt frame {path}: {reason}")]
    CorruptFrame { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error("config: {0}")]
    Config(String),
    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn read(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Unreadable {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Unwritable {
            path: path.into(),
            source,
        }
    }
}
