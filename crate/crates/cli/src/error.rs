use std::fmt;

use kanrecon_core::tensor::TensorError;
use kanrecon_core::Error;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NON_FINITE: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const MISSING_OUTPUTS: i32 = 6;
    /// Any other failure inside the pipeline.
    pub const INTERNAL: i32 = 1;
}

/// A failed command: the message shown to the user and the exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(exit::CONFIG, message)
    }

    /// Attach a path or step to the message.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(exit::IO, e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Tensor(TensorError::Io(_)) => exit::IO,
            Error::BadMagic | Error::Truncated { .. } | Error::Format(_) | Error::ShapeOverflow(_) => exit::IO,
            Error::NonFiniteLoss { .. } => exit::NON_FINITE,
            Error::Tensor(TensorError::Checkpoint(_)) => exit::CHECKPOINT,
            _ => exit::INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
