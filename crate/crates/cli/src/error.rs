use std::fmt;
use std::path::Path;

use discourse_rnn::Error;

/// Success.
pub const EXIT_OK: i32 = 0;
/// Runtime failure: output not writable, non-finite result, ...
pub const EXIT_RUNTIME: i32 = 1;
/// Usage error or invalid input.
pub const EXIT_USAGE: i32 = 2;
/// Training diverged.
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    /// Failure to read or parse an input file.
    pub fn input(path: &Path, err: impl fmt::Display) -> Self {
        Self::usage(format!("{}: {err}", path.display()))
    }

    /// Failure to write an output file.
    pub fn output(path: &Path, err: impl fmt::Display) -> Self {
        Self::runtime(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::Io(_) => EXIT_RUNTIME,
            Error::Shape { .. } | Error::Domain(_) | Error::Contract(_) | Error::Format(_) => EXIT_USAGE,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
