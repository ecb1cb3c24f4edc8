//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: configuration
//! problems (2), missing artifacts such as corpora or checkpoints (3), and
//! everything else that fails at runtime (4).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible operand shapes for a tensor primitive.
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside a primitive's numeric domain (log of a non-positive
    /// value, softmax over a fully masked row, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A required corpus, checkpoint, or run directory does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Malformed or incompatible serialized data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error: 2 for configuration problems, 3 for
    /// missing artifacts, 4 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            _ => 4,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingArtifact(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
