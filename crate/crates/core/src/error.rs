use std::path::PathBuf;

use thiserror::Error;

use crate::simulators::SimFailure;

/// Errors raised anywhere in the history-matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `key` names the offending entry.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("parameter `{name}` value {value} outside [{min}, {max}]")]
    OutOfBounds {
        name: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not positive definite (smallest pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { pivot: f64, row: usize },

    #[error("no candidate satisfied the region after {candidates} draws; the non-implausible set may be empty")]
    EmptyRegion { candidates: usize },

    #[error("simulator failure: {0}")]
    Simulator(#[from] SimFailure),

    #[error("too many failed simulator runs in wave {wave}: {failed} of {total}")]
    TooManyFailures {
        wave: usize,
        failed: usize,
        total: usize,
    },

    #[error("diagnostics failed for outputs {outputs:?}")]
    DiagnosticsFailed { outputs: Vec<usize> },

    #[error("diagnostic runs overlap the training design ({count} shared points)")]
    DiagnosticOverlap { count: usize },

    #[error("wave {0} is already complete (use --force to redo it)")]
    WaveComplete(usize),

    #[error("campaign state error: {0}")]
    State(String),

    #[error("campaign directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit status used by the command-line front end:
    /// 1 for validation or diagnostic failures, 2 for I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Locked(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
