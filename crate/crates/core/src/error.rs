use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    /// A payload does not match the schema its block type or adapter kind requires.
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("unreadable {format} input: {message}")]
    Format { format: String, message: String },

    #[error("document has no pages")]
    EmptyDocument,

    #[error("adapter unavailable: {0}")]
    AdapterUnavailable(String),

    #[error("adapter {adapter} failed: {message}")]
    Adapter { adapter: String, message: String },

    #[error("index was built with embedder {found:?}, configured embedder is {expected:?}")]
    EmbedderMismatch { expected: String, found: String },

    #[error("script {script} line {line}: {message}")]
    Script { script: String, line: usize, message: String },

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound { kind, id: id.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn adapter(adapter: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Adapter { adapter: adapter.into(), message: message.into() }
    }
}
