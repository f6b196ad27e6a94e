//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by simulator components.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor (or parameter) shape did not match what an operation required.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// `backward` was invoked without a preceding `forward`.
    #[error("backward called before forward")]
    BackwardBeforeForward,

    /// A prototype was requested for a class with no support samples.
    #[error("empty support set for class {class}")]
    EmptySupport { class: usize },

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset or partition request cannot be satisfied.
    #[error("insufficient samples: {0}")]
    Sizing(String),

    /// A persisted dataset or manifest is malformed.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
