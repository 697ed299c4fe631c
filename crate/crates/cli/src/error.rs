//! Exit codes: 0 success, 1 configuration, usage or data error, 2 file or
//! audio I/O error.

use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<medleysep_core::Error> for CliError {
    fn from(e: medleysep_core::Error) -> Self {
        use medleysep_core::Error as E;
        match e {
            E::Io { .. } | E::Wav { .. } => Self::io(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<medleysep_nn::Error> for CliError {
    fn from(e: medleysep_nn::Error) -> Self {
        use medleysep_nn::Error as E;
        match e {
            E::Core(c) => c.into(),
            E::Io { .. } | E::Checkpoint { .. } => Self::io(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Wraps a filesystem error with the path it concerns.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::io(format!("{}: {e}", path.display()))
}
