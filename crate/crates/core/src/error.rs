use thiserror::Error;

/// Errors surfaced by the simulator. Shape and contract violations are
/// recoverable values, not panics, so callers (CLI, federation loop) can
/// report them with context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("poisoned gradient (non-finite) in {0}")]
    PoisonedGradient(String),

    #[error("configuration error: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    ParseLine { line: usize, msg: String },

    #[error("similarity undefined for zero-variance input")]
    UndefinedSimilarity,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
