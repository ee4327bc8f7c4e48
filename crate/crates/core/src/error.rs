use thiserror::Error;

/// Errors raised by the measurement, bound and data routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("degenerate point: {0}")]
    Degenerate(String),

    #[error("division by zero: {0}")]
    ZeroDivisor(String),

    #[error("missing measurement `{0}`")]
    MissingField(&'static str),

    #[error("{count} row selections exceed the exact budget {budget}; use the upper or sampled mode")]
    BudgetExceeded { count: f64, budget: usize },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("checksum mismatch for `{name}`: expected {expected:016x}, found {found:016x}")]
    Checksum {
        name: String,
        expected: u64,
        found: u64,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
