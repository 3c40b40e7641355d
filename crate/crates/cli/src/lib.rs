//! Command implementations behind the `defunet` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod report;

use defunet::Error;

pub use config::{DataConfig, RunConfig};

/// Failure of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("{0}")]
    Usage(String),
    /// Unreadable or inconsistent data or checkpoint files (exit 2).
    #[error("{0}")]
    Data(String),
    /// NaN losses, failed gradient checks (exit 3).
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Contract(_) | Error::Indivisible { .. } => CliError::Usage(msg),
            Error::Numeric(_) | Error::Degenerate(_) | Error::UnsupportedOp(_) => CliError::Numeric(msg),
            Error::Dimension { .. } | Error::Shape { .. } => CliError::Usage(msg),
            Error::Format(_)
            | Error::Integrity(_)
            | Error::Image { .. }
            | Error::InsufficientSamples { .. }
            | Error::Io(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
