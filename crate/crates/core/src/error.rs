use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(#[from] crate::plan::PlanViolation),

    /// The stored entry was produced by a different model and must be recomputed.
    #[error("stale cache entry {key}: stored fingerprint {stored:016x}, live model {live:016x}")]
    StaleCache { key: String, stored: u64, live: u64 },

    #[error("integrity error for {key}: {reason}")]
    Integrity { key: String, reason: String },

    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("i/o error on {path}: {source}")]
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
}
