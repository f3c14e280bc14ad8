use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("gamma function pole at x = {0}")]
    GammaPole(f64),
    /// A truncated series did not reach its tolerance.
    #[error("series did not converge within {terms} terms (last term magnitude {last_term:e})")]
    Accuracy { terms: usize, last_term: f64 },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    /// Expression outside the monomial fragment; use a numeric scheme instead.
    #[error("unsupported form: {0}")]
    Unsupported(String),
    #[error("singular: {0}")]
    Singular(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver failed at node {node} (t = {t}): {message}")]
    Solver {
        node: usize,
        t: f64,
        message: String,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
