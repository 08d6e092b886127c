//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file content, with the 1-based line it came from.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An input violated a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration file or config combination is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: String, msg: String },

    /// A forward operation produced a NaN or infinity.
    #[error("non-finite value produced at {path}")]
    NonFinite { path: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Divergence {
        epoch: usize,
        batch: usize,
        msg: String,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (config, file content,
    /// precondition violations) rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Validation(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
