//! Error type shared across the workbench.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or broadcast mismatch between tensors.
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Argument outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value surfaced in a numeric path.
    #[error("numeric error in {location}: non-finite value")]
    NonFinite { location: String },

    /// Class label outside `[0, class_count)`.
    #[error("label error: label {label} out of range [0, {classes})")]
    Label { label: usize, classes: usize },

    /// Backward called with a trace that does not match the graph state.
    #[error("trace error: {0}")]
    Trace(String),

    /// Batch statistics cannot be formed (train-mode batch of one).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Malformed file contents; offset is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Invalid run or attack configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
