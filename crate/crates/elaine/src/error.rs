use std::path::PathBuf;

use thiserror::Error;

use crate::elaine::LossTerms;

/// Unified error type for the whole crate.
///
/// `Validation` covers bad arguments and malformed inputs detected up front;
/// contract violations (e.g. mismatched matrix shapes passed between layers)
/// panic instead.
#[derive(Debug, Error)]
pub enum ElaineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "training diverged: non-finite loss at epoch {epoch}, step {step} ({detail}); \
         {} completed epochs recorded",
        history.len()
    )]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        history: Vec<LossTerms>,
    },
}

impl ElaineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ElaineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        ElaineError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ElaineError>;
