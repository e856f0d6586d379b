//! Error type shared across the crate.
//!
//! Variants are grouped by how the command-line driver reports them:
//! configuration and contract problems, I/O, malformed inputs, numeric
//! aborts, and artifact mismatches each map to a distinct exit code.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape or dimension disagreement between tensors handed to an op.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value; the message names the offending field.
    #[error("config: {0}")]
    Config(String),

    /// Text input that could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A mesh face with more or fewer than three vertices.
    #[error("unsupported face at line {line}: {vertices} vertices (triangles only)")]
    UnsupportedFace { line: usize, vertices: usize },

    /// Input ended before the declared amount of data.
    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic bytes or an unknown format version in a binary artifact.
    #[error("format: {0}")]
    Format(String),

    /// A binary artifact parsed but its contents are internally inconsistent.
    #[error("integrity: {0}")]
    Integrity(String),

    /// A non-finite value surfaced where the math requires finite numbers.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Geometrically degenerate input (zero area, zero extent, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An ingest step found nothing usable.
    #[error("empty ingest: {0}")]
    EmptyIngest(String),

    /// Two artifacts that must agree (checkpoint vs. dataset, ...) do not.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
}

impl Error {
    /// Helper for I/O errors tagged with the path they occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::EmptyIngest(_) => 4,
            Error::Numeric(_) => 5,
            Error::ArtifactMismatch(_) => 6,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
