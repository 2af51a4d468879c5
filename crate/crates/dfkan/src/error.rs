use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: left is {lhs:?}, right is {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A non-finite value (NaN or infinity) surfaced where finite data is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A backward rule or parameter walk broke its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset construction or ingestion failed.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted on a numeric failure.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An analysis instrument cannot run on this model.
    #[error("instrument not applicable: {0}")]
    Ineligible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
