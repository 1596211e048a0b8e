use thiserror::Error;

/// Errors raised by model construction, fitting and prediction.
#[derive(Clone, Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("covariance matrix is not positive definite at parameters {params:?}")]
    NotPositiveDefinite { params: Vec<f64> },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimizer failed: {reason} (last valid parameters {last_valid:?})")]
    Optimizer {
        reason: String,
        last_valid: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by the numbers rather than by the inputs' shape.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::Singular(_)
                | Error::Numerical(_)
                | Error::Optimizer { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
