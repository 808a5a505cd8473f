//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// File-system failure, with the path that caused it.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Malformed record in a line-oriented file. Lines are 1-based.
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Duplicate ids, unresolved references and similar consistency violations.
    Integrity(String),
    /// Caller passed an argument outside the documented domain.
    Argument(String),
    /// Matrix or vector dimensions do not line up.
    Shape(String),
    /// NaN or infinity where a finite value is required.
    Numeric(String),
    /// Knowledge-base lookup failed (retryable transport class).
    Retrieval(String),
    /// LLM backend failed after exhausting retries.
    Backend(String),
    /// Image bytes could not be read for encoding.
    Encoding(String),
    /// Checkpoint does not match the active architecture fingerprint.
    Compat(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Parse { path, line, msg } => write!(f, "parse error at {path}:{line}: {msg}"),
            Error::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Retrieval(msg) => write!(f, "retrieval error: {msg}"),
            Error::Backend(msg) => write!(f, "backend error: {msg}"),
            Error::Encoding(msg) => write!(f, "encoding error: {msg}"),
            Error::Compat(msg) => write!(f, "compatibility error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
