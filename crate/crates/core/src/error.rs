//! Error type shared across the crate.

use std::fmt;

/// Errors produced by the data pipeline, model, training loop, and file formats.
#[derive(Debug)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    InvalidArgument(String),
    /// A file could not be read or written.
    Io(std::io::Error),
    /// A file's contents did not match the expected format; carries the byte
    /// offset where decoding failed when known.
    Format { message: String, offset: Option<u64> },
    /// A gradient or activation became non-finite; names the offending parameter.
    NonFinite { parameter: String },
    /// A metric is undefined for the given input (e.g. zero-norm ground truth).
    UndefinedMetric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format { message, offset } => match offset {
                Some(off) => write!(f, "format error at byte {off}: {message}"),
                None => write!(f, "format error: {message}"),
            },
            Error::NonFinite { parameter } => {
                write!(f, "non-finite value in parameter `{parameter}`")
            }
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
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
