use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the analysis core.
///
/// Variants are grouped so callers can map them to stable exit codes:
/// input validation (`Shape`, `Data`, `Format`, `Manifest`, ...) versus
/// failures that only show up while computing (`DegenerateSubspace`,
/// `DegenerateSample`, ...).
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("zero-norm residual state")]
    ZeroNorm,

    #[error("duplicate answer token id {0}")]
    DuplicateToken(usize),

    #[error("token {0} is not an answer token of this subspace")]
    NotAnAnswer(usize),

    #[error("sensor and user answers coincide (token {0})")]
    NoConflict(usize),

    #[error("degenerate answer subspace: all tangential rows vanish")]
    DegenerateSubspace,

    #[error("degenerate decision direction: d* has zero norm")]
    DegenerateDirection,

    #[error("subspace was built for a different base direction")]
    BaseMismatch,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("invalid reference model configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] crate::dumpio::FormatError),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AuditError {
    /// True for errors caused by malformed or inconsistent inputs, as
    /// opposed to failures discovered mid-computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            AuditError::Shape(_)
                | AuditError::Data(_)
                | AuditError::IndexOutOfRange { .. }
                | AuditError::DuplicateToken(_)
                | AuditError::NoConflict(_)
                | AuditError::Format(_)
                | AuditError::Manifest(_)
                | AuditError::Config(_)
        )
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
