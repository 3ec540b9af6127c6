use thiserror::Error;

/// Errors produced by the simulation and optimization routines.
///
/// The variants are grouped by the exit-code family the command line maps
/// them to: validation problems, infeasibility, and numerical failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("subcarrier allocation error: {0}")]
    Allocation(String),

    #[error("problem too large: {0}")]
    SizeGuard(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("missing instrumentation: {0}")]
    Instrumentation(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Coarse classification used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension { .. }
            | Error::Validation(_)
            | Error::ConstraintViolation(_)
            | Error::Allocation(_)
            | Error::SizeGuard(_)
            | Error::Unsupported(_)
            | Error::Instrumentation(_)
            | Error::Io(_) => ErrorCategory::Validation,
            Error::Infeasible(_) => ErrorCategory::Infeasible,
            Error::Domain(_) | Error::Numerical(_) | Error::Divergence(_) | Error::Fit(_) => {
                ErrorCategory::Numerical
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Infeasible,
    Numerical,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
