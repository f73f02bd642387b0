use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A cache, tape or record does not belong to the parameters it is used with.
    #[error("state error: {0}")]
    State(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    /// The finite-difference oracle hit a non-finite function value.
    #[error("gradient oracle: non-finite evaluation at coordinate {coordinate}")]
    Oracle { coordinate: usize },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("dataset file {}: {source}", path.display())]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reasons a dataset file or an in-memory dataset fails validation.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found")]
    Missing,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("line {line}: expected {expected} values, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{section} section is empty")]
    EmptySection { section: &'static str },

    #[error("{0}")]
    DanglingReference(String),

    #[error("{0}")]
    Inconsistent(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
