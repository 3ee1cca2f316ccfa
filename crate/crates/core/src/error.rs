//! Crate-wide error type.

use thiserror::Error;

/// Coarse classification used by callers that must map failures to
/// process exit codes or retry policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input: malformed files, out-of-range parameters, contract violations.
    Validation,
    /// Numerical failure: singular systems, non-convergence, defective decompositions.
    Numerical,
    /// Filesystem / IO failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("did not converge after {iterations} iterations: {message}")]
    NonConvergence { iterations: usize, message: String },

    #[error("numerical failure in {context}: {message}")]
    Numerical { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::DegenerateSample(_) => {
                ErrorCategory::Validation
            }
            Error::NonConvergence { .. } | Error::Numerical { .. } => ErrorCategory::Numerical,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
