//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input that could not be parsed (CSV rows, config values).
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Structurally valid input that violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Dimension mismatch between matrices/vectors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite values, failed factorizations, corrupted sampler state.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was asked to work on nothing.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A pairwise similarity is undefined for the given counts.
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
