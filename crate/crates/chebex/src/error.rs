//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the pricing and exposure machinery.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    /// Invalid interpolation domain (non-finite or empty interval).
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    /// Malformed numeric input data (non-finite values, empty samples).
    #[error("invalid data: {0}")]
    InvalidData(String),
    /// Out-of-range scalar parameter.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// Requested size exceeds a hard guard.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    /// A numerical procedure failed its internal diagnostics.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Inconsistent configuration of grids, domains or methods.
    #[error("configuration error: {0}")]
    Config(String),
    /// Date not on the product schedule or schedule not on the grid.
    #[error("schedule error: {0}")]
    Schedule(String),
    /// File I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}
