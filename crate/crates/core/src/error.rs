use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("invalid scene config: {0}")]
    Scene(String),

    #[error("could not sample a non-empty cylinder after {0} attempts")]
    SamplingExhausted(usize),

    #[error("coverage failure: point {0} is not covered by any tile")]
    Uncovered(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
