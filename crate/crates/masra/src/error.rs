//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument in {op}: {reason}")]
    InvalidArg { op: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("parameter {0} registered twice")]
    DuplicateParam(String),

    #[error("config error: key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt dataset record {record}: {reason}")]
    CorruptRecord { record: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at {context}")]
    Diverged { context: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
