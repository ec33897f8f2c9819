use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShrinkError {
    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Raised when a Gram/normal-equation matrix is singular or its
    /// condition number exceeds the guard.
    #[error("ill-conditioned system: {context} (condition number {condition:e})")]
    IllConditioned { context: &'static str, condition: f64 },

    #[error("non-finite objective in {0}")]
    NonFinite(&'static str),

    #[error("{method} did not converge after {iterations} iterations (last lambda {last_lambda})")]
    NotConverged {
        method: &'static str,
        iterations: usize,
        last_lambda: f64,
    },

    #[error("{method} requires p > k+2 (p = {p}, k = {k})")]
    TooFewUnits { method: &'static str, p: usize, k: usize },

    #[error("unsupported combination: {0}")]
    Unsupported(String),
}

impl ShrinkError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ShrinkError::InvalidInput(msg.into())
    }

    /// True for failures caused by numerics rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ShrinkError::IllConditioned { .. }
                | ShrinkError::NonFinite(_)
                | ShrinkError::NotConverged { .. }
                | ShrinkError::TooFewUnits { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, ShrinkError>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(ShrinkError::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
