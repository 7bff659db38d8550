//! Subcommands of the `edsc` binary.

pub mod commands;
pub mod config;

use std::fmt;

use edsc::Error;

/// A failure with its process exit code: 1 usage, 2 data, 3 numerical.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Shape { .. } | Error::Format { .. } | Error::EmptyMask | Error::Io(_) => 2,
            Error::NonFinite(_) | Error::Numerical(_) => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
