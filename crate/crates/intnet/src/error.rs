//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor construction, graph validation, model file
/// handling, and the quantization pipeline.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes or element counts do not line up.
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    /// A scalar argument is outside its documented domain.
    InvalidArgument { what: String },
    /// The network graph violates a structural rule. Carries the id of the
    /// offending layer so the report points at something actionable.
    Graph { layer: String, message: String },
    /// A model or report file failed to parse.
    Parse { line: usize, message: String },
    /// Binary tensor data is malformed.
    Blob { message: String },
    /// An integer range or accumulator bound would be exceeded.
    Overflow { context: String },
    /// A floating point value is not finite where a finite one is required.
    NonFinite { context: String },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl Error {
    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(what: impl Into<String>) -> Self {
        Error::InvalidArgument { what: what.into() }
    }

    pub fn graph(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Graph {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn blob(message: impl Into<String>) -> Self {
        Error::Blob {
            message: message.into(),
        }
    }

    pub fn overflow(context: impl Into<String>) -> Self {
        Error::Overflow {
            context: context.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected {expected}, got {got}"),
            Error::InvalidArgument { what } => write!(f, "invalid argument: {what}"),
            Error::Graph { layer, message } => write!(f, "layer '{layer}': {message}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Blob { message } => write!(f, "malformed tensor blob: {message}"),
            Error::Overflow { context } => write!(f, "integer overflow: {context}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
