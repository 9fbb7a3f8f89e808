use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected geometry) disagree on shape.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A precondition on model state was violated (e.g. quantizing a model
    /// that has not been prepared for the requested mode).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The differentiation tape met an operation it cannot differentiate.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact (checkpoint, config, report) failed to parse.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
