//! Command-line front end: config parsing, the three commands, CSV output.

pub mod commands;
pub mod config;
pub mod csv;

use std::process::ExitCode;

pub use config::RunConfig;

/// Parses arguments, runs the selected command, and maps errors to exit
/// codes: 0 success, 1 runtime error, 2 config error, 3 output I/O error.
pub fn run_main(args: &[String]) -> ExitCode {
    match commands::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Failure classes of a CLI run, each with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag, unknown key, type error, or constraint violation.
    Config(String),
    /// A simulation or training call failed.
    Runtime(gatedrop_core::Error),
    /// The output destination could not be written.
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "cannot write output: {e}"),
        }
    }
}

impl From<gatedrop_core::Error> for CliError {
    fn from(e: gatedrop_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
