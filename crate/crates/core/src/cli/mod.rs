//! Run files, command implementations and the exit-code contract used by
//! the `cloth` binary.

pub mod bench;
pub mod commands;
pub mod config;
pub mod plot;
pub mod verify;

use std::fmt;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Exit code for an error raised by the library.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Training(_) | Error::Scale(_) | Error::Contract(_) => {
            EXIT_NUMERIC
        }
        Error::Dimension(_)
        | Error::Domain(_)
        | Error::Parameter(_)
        | Error::Data(_)
        | Error::Format { .. }
        | Error::Config(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_USAGE,
    }
}

/// A failed command: message and process exit code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(EXIT_NUMERIC, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(Failure::from(Error::Config("x".into())).code, EXIT_USAGE);
        assert_eq!(
            Failure::from(Error::Training("nan".into())).code,
            EXIT_NUMERIC
        );
        assert_eq!(
            Failure::from(Error::Numeric("nan".into())).code,
            EXIT_NUMERIC
        );
    }
}
