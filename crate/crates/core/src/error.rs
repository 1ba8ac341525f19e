use std::io;

use thiserror::Error;

/// Errors produced by the restoration engine.
#[derive(Debug, Error)]
pub enum HbeError {
    /// Inputs with mismatched dimensions, out-of-range indices or invalid parameters.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value outside the domain of the objective (e.g. an indefinite precision matrix).
    #[error("domain error: {0}")]
    Domain(String),

    /// Symmetric factorization broke down at the given pivot.
    #[error("{context}: matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite {
        context: &'static str,
        pivot: usize,
        value: f64,
    },

    /// A linear system that should have been regular turned out singular.
    #[error("singular system in {0}")]
    Singular(&'static str),

    /// The objective evaluated to a non-finite value.
    #[error("non-finite objective at iteration {iteration} (term: {term})")]
    NonFinite { iteration: usize, term: &'static str },

    /// Inconsistent internal state, e.g. an image pixel no patch covers.
    #[error("state error: {0}")]
    State(String),

    /// Malformed image file.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Malformed configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HbeError {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HbeError::Domain(_)
                | HbeError::NotPositiveDefinite { .. }
                | HbeError::Singular(_)
                | HbeError::NonFinite { .. }
                | HbeError::State(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, HbeError>;
