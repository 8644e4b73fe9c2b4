//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by tokenization, alignment, scoring, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A character is not part of the configured alphabet.
    #[error("character {ch:?} at offset {offset} is outside the alphabet")]
    OutOfAlphabet { ch: char, offset: usize },

    /// Two texts that must be identical for alignment differ.
    #[error("alignment texts differ at character offset {offset}")]
    TextMismatch { offset: usize },

    /// A precondition on an operation's inputs was violated.
    #[error("{0}")]
    Domain(String),

    /// Exact enumeration would exceed its sequence budget.
    #[error("enumerating {vocab} tokens to length {max_len} exceeds the budget of {budget} sequences")]
    BudgetExceeded { vocab: usize, max_len: usize, budget: usize },

    /// Invalid configuration or checkpoint contents.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or gradient became non-finite during training.
    #[error("non-finite value at step {step}: {diagnostic}")]
    NonFinite { step: usize, diagnostic: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
