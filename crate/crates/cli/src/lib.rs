//! Command-line front end for the `flowgnn` library.

pub mod commands;
pub mod config;

use flowgnn::error::ErrorClass;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A file named on the command line could not be read or parsed.
    #[error("{0}")]
    Input(flowgnn::Error),
    #[error(transparent)]
    Run(#[from] flowgnn::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_USAGE,
            CliError::Run(e) => match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Marks a failure to read a command-line input.
pub fn input<T>(r: flowgnn::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Input)
}
