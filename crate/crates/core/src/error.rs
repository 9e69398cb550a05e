use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("session {0} not found")]
    SessionNotFound(String),

    #[error("story version {0} not found")]
    VersionNotFound(u64),

    #[error("version conflict: expected version {expected}, got {got}")]
    VersionConflict { expected: u64, got: u64 },

    #[error("unknown target: {0}")]
    UnknownTarget(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("segment index {index} out of range for story with {len} segments")]
    BadIndex { index: usize, len: usize },

    #[error("store unavailable at {path}: {source}")]
    StoreUnavailable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("session document failed validation: {0}")]
    Schema(String),

    #[error("unreadable image {id}: {reason}")]
    UnreadableImage { id: String, reason: String },

    #[error("backend timed out after {0} ms")]
    BackendTimeout(u64),

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("backend unreachable: {0}")]
    Transport(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend returned an empty completion")]
    EmptyCompletion,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("embedding file {path}: {reason}")]
    Embedding { path: PathBuf, reason: String },

    #[error("text has no in-vocabulary tokens")]
    NoVector,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("session {session} has no story in mode {mode}")]
    MissingMode { session: String, mode: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
