//! Crate-wide error type.
//!
//! Fallible operations return [`Result`]. Shape problems name the operation
//! and the offending shapes so failures are diagnosable without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the operation's contract.
    #[error("{op}: dimension mismatch: {detail}")]
    Dim { op: &'static str, detail: String },

    /// An argument is outside the operation's documented domain.
    #[error("{op}: invalid argument: {detail}")]
    Arg { op: &'static str, detail: String },

    /// Persistent data failed structural validation while being read.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// A stored artifact declares a format version this build cannot read.
    #[error("format version mismatch: found {found}, supported {supported}")]
    Version { found: u32, supported: u32 },

    /// A checkpoint buffer does not match its manifest entry.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Configuration text could not be interpreted.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Arg { op, detail: detail.into() }
    }
}
