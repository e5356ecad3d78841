use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Full pattern enumeration would exceed the configured cap.
    #[error("pattern enumeration over {size} units exceeds the cap of {cap}; use a sparse-support weight or raise the cap")]
    CapExceeded { size: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate intervention: {0}")]
    DegenerateIntervention(String),

    #[error("propensity score unavailable; only the balancing estimator applies")]
    PropensityUnavailable,

    #[error("positivity violation: {0}")]
    PositivityViolation(String),

    #[error("invalid structure specification: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// One or more balancing fits have no exact solution.
    #[error("balancing equation infeasible for: {}", .0.join(", "))]
    InfeasibleFit(Vec<String>),

    #[error("degenerate degrees of freedom: denominator {denominator} must be positive")]
    DegenerateDf { denominator: i64 },

    #[error("contrast between weight vectors is zero; the structures yield identical weights")]
    DegenerateContrast,

    #[error("SNR calibration failed: {0}")]
    CalibrationFailed(String),

    /// `row` is the 1-based data row (header excluded); 0 when not tied to a row.
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn parse(row: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            row,
            column: column.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
