//! Crate-wide error type.
//!
//! Variants are grouped by what the caller can do about them: `Structural`
//! and `Contract` mean the program built an invalid graph or violated an
//! operation's preconditions, `Numeric` means evaluation produced non-finite
//! values, `Config` means user-supplied configuration or input files are
//! invalid. The CLI maps `Numeric` to exit code 3 and everything else to 2.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Malformed graph or model structure: shape mismatches, bad indices,
    /// parameter groups from a foreign store.
    Structural(String),
    /// A non-finite value showed up during evaluation or optimization.
    Numeric(String),
    /// An operation's contract was violated by the caller.
    Contract(String),
    /// Invalid configuration, CLI usage, or malformed input files.
    Config(String),
    Io(std::io::Error),
}

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code for the CLI: numeric failures are distinguished from
    /// configuration and usage problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Structural(m) => write!(f, "structural error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
