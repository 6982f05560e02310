use std::fmt;

/// Errors surfaced by tensor ops, block configuration, and checkpoint I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension or extent mismatch between tensors.
    Shape { op: &'static str, detail: String },
    /// Invalid configuration value; names the offending field.
    Config { field: String, detail: String },
    /// API contract violation (e.g. non-scalar loss passed to backward).
    Contract { op: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str, node: usize },
    /// Checkpoint or tensor-file I/O failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config { field, detail } => write!(f, "config error ({field}): {detail}"),
            Error::Contract { op, detail } => write!(f, "contract violation in {op}: {detail}"),
            Error::NonFinite { op, node } => {
                write!(f, "non-finite values produced by {op} (tape node {node})")
            }
            Error::Io(detail) => write!(f, "i/o error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
