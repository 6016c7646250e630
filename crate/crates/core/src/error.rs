use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("event at {t_event} is later than reference time {t_ref}")]
    FutureEvent { t_ref: i64, t_event: i64 },

    #[error("empty sequence")]
    EmptySequence,

    #[error("user {0} has no events in any source")]
    EmptyHistory(u64),

    #[error("non-finite loss {loss} (learning rate {learning_rate}); lower the learning rate or check inputs for overflow")]
    NonFiniteLoss { loss: f64, learning_rate: f64 },

    #[error("bad magic bytes: expected {expected}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch (file truncated or corrupt)")]
    Checksum,

    #[error("malformed binary payload: {0}")]
    Format(String),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("zero control value; relative change undefined")]
    ZeroControl,

    #[error("all labels identical; base-rate entropy is zero")]
    DegenerateLabels,

    #[error("node {0} has no ground-truth label")]
    Unlabeled(u64),

    #[error("held-out set is empty")]
    EmptyHeldout,

    #[error("refresh produced no embeddings ({skipped} users skipped)")]
    NoEmbeddings { skipped: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
