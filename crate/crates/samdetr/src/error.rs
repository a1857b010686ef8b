//! Errors of the operational crate: core math failures plus IO, file-format,
//! configuration, and training faults.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A failure inside the math core.
    Core(samdetr_core::error::Error),
    Io(std::io::Error),
    /// A malformed file of the named format.
    Format { what: &'static str, msg: String },
    Config(String),
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(what: &'static str, msg: impl Into<String>) -> Error {
        Error::Format { what, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Error {
        Error::Train(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Core(e) => write!(f, "{e}"),
            Error::Io(e) => write!(f, "io: {e}"),
            Error::Format { what, msg } => write!(f, "{what}: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Train(msg) => write!(f, "train: {msg}"),
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

impl From<samdetr_core::error::Error> for Error {
    fn from(e: samdetr_core::error::Error) -> Error {
        Error::Core(e)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Error {
        Error::Io(e)
    }
}
