use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error type. `code()` yields the stable machine-parseable
/// prefix used by the CLI (`error:<code>: message`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cannot split: {0}")]
    CannotSplit(String),

    #[error("leakage guard: {0}")]
    Leakage(String),

    #[error("schema hash mismatch: expected {expected}, found {found}")]
    SchemaHashMismatch { expected: String, found: String },

    #[error("unsupported artifact version: {found}")]
    VersionMismatch { found: String },

    #[error("degenerate labels: need at least one positive and one negative")]
    DegenerateLabels,

    #[error("vector length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("no positive examples: {0}")]
    EmptyPositives(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("event {0} has no context text; the hybrid model requires context")]
    MissingContext(String),

    #[error("dangling reference: generation points at unknown event {0}")]
    DanglingReference(String),

    #[error("provenance: {0}")]
    Provenance(String),

    #[error("bad request: {0}")]
    BadRequest(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "json",
            Error::InvalidConfig(_) => "invalid_config",
            Error::CannotSplit(_) => "cannot_split",
            Error::Leakage(_) => "leakage",
            Error::SchemaHashMismatch { .. } => "schema_hash_mismatch",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::DegenerateLabels => "degenerate_labels",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyPositives(_) => "empty_positives",
            Error::Infeasible(_) => "infeasible",
            Error::MissingContext(_) => "missing_context",
            Error::DanglingReference(_) => "dangling_reference",
            Error::Provenance(_) => "provenance",
            Error::BadRequest(_) => "bad_request",
        }
    }
}
