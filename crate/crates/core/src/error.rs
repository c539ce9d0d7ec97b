use thiserror::Error;

/// Errors raised by generation, scoring and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("token mismatch at position {position}: expected {expected:?}, found {found:?}")]
    TokenMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("capability not supported: {0}")]
    Unsupported(String),
    #[error("no replacement candidates: {0}")]
    EmptyCandidates(String),
    #[error("no editable positions: {0}")]
    NoEditablePositions(String),
    #[error("empty rating list")]
    EmptyRatings,
    #[error("ratings from more than one annotator ({0} and {1})")]
    MixedAnnotators(String, String),
    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("remote adapter error: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
