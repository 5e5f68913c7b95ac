use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or validating datasets, pools and checkpoints.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line, expected {expected} tab-separated fields")]
    Malformed {
        path: PathBuf,
        line: usize,
        expected: usize,
    },
    #[error("{path}: no records")]
    Empty { path: PathBuf },
    #[error("{path}: unknown item(s) on lines {lines:?}")]
    UnknownItems { path: PathBuf, lines: Vec<usize> },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{0}")]
    Other(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures of an LLM backend.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request budget exhausted")]
    BudgetExhausted,
    #[error("no recorded response for prompt")]
    ReplayMiss,
    #[error("transport: {0}")]
    Transport(String),
    #[error("backend not configured: {0}")]
    NotConfigured(String),
}

/// Errors from the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("user {user} has interacted with every item; no negative exists")]
    NoNegative { user: String },
    #[error("non-finite loss at epoch {epoch}, step {step}: bpr={bpr}, con={con}, reg={reg}")]
    NonFinite {
        epoch: usize,
        step: usize,
        bpr: f64,
        con: f64,
        reg: f64,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}
