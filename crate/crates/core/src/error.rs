use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("class {class} out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },

    #[error("actnorm block {0} used before data-dependent initialization")]
    Uninitialized(usize),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("format version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for numeric failures (non-finite values during forward or backward).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
