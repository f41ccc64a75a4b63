//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. The variants map onto the
//! process exit codes used by the CLI: I/O problems exit 3, numeric failures
//! (NaN/Inf) exit 4, everything else is a precondition violation and exits 2.

use std::fmt;
use std::io;
use std::path::Path;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or vector dimensions do not line up.
    Shape { context: String },
    /// A precondition on an argument or configuration was violated.
    InvalidArg { context: String },
    /// A NaN or Inf appeared where only finite values are allowed.
    NonFinite { context: String },
    /// Backward was requested without a matching cached forward pass.
    Tape { context: String },
    /// A file exists but its contents are malformed (bad magic, truncation,
    /// version or digest mismatch).
    Format { context: String },
    /// Two artifacts that must belong to the same run disagree (config hash,
    /// split hash, spec digest).
    Mismatch { context: String },
    /// Underlying I/O failure.
    Io { context: String, source: io::Error },
}

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::Shape { context: context.into() }
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidArg { context: context.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    pub fn tape(context: impl Into<String>) -> Self {
        Error::Tape { context: context.into() }
    }

    pub fn format(context: impl Into<String>) -> Self {
        Error::Format { context: context.into() }
    }

    pub fn mismatch(context: impl Into<String>) -> Self {
        Error::Mismatch { context: context.into() }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io { context: path.display().to_string(), source }
    }

    /// Process exit code for this error class: 2 precondition, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context } => write!(f, "shape mismatch: {context}"),
            Error::InvalidArg { context } => write!(f, "invalid argument: {context}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Tape { context } => write!(f, "tape error: {context}"),
            Error::Format { context } => write!(f, "malformed file: {context}"),
            Error::Mismatch { context } => write!(f, "artifact mismatch: {context}"),
            Error::Io { context, source } => write!(f, "i/o error on {context}: {source}"),
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
