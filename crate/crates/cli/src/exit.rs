//! Process exit codes and the error type commands return.

use std::fmt;
use std::io::ErrorKind;

use hanerf_core::Error;

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const IO: u8 = 2;
pub const MISSING: u8 = 3;
pub const BAD_INPUT: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn bad_input(message: impl Into<String>) -> Self {
        Self::new(BAD_INPUT, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(MISSING, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => MISSING,
            Error::Io { .. } => IO,
            Error::Input(_)
            | Error::Config(_)
            | Error::ShapeMismatch { .. }
            | Error::Image { .. }
            | Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Incompatible(_) => BAD_INPUT,
            Error::Divergence { .. } | Error::Generation(_) => INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;
