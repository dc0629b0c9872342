use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {rows} usable rows, need at least {needed}")]
    InsufficientData { rows: usize, needed: usize },

    #[error("meter {0} has no trainable season cell")]
    MeterUntrainable(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("stale snapshot version {offered}: store already at {current}")]
    StaleVersion { offered: u64, current: u64 },

    #[error("serving store has no published snapshot")]
    EmptyStore,

    #[error("snapshot version {0} not found")]
    SnapshotNotFound(u64),

    #[error("corrupt snapshot file {path}: {reason}")]
    CorruptSnapshot { path: PathBuf, reason: String },

    #[error("injected fault: {0}")]
    InjectedFault(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by bad or missing data rather than the environment.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InsufficientData { .. }
                | Error::MeterUntrainable(_)
                | Error::Parse { .. }
                | Error::StaleVersion { .. }
                | Error::EmptyStore
                | Error::SnapshotNotFound(_)
                | Error::CorruptSnapshot { .. }
        )
    }
}
