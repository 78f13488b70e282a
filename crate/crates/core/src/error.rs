use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {rule}")]
    Parse { line: usize, rule: String },

    #[error("invalid episode: {0}")]
    Episode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no distractor pool: {0}")]
    NoDistractorPool(String),

    #[error("insufficient personas: need at least {required}, found {found}")]
    InsufficientPersonas { required: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocab hash mismatch: checkpoint has {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
