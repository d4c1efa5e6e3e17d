use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("sample index {index} out of range for shard with {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("normal equations are singular; least-squares optimum is not unique")]
    Singular,

    #[error("local update diverged at snapshot {snapshot}, inner step {step}")]
    LocalDivergence { snapshot: usize, step: usize },

    #[error("round {round}, agent {agent}: {source}")]
    AgentFailure {
        round: usize,
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("global parameter became non-finite after round {round}")]
    GlobalDivergence { round: usize },

    #[error("algorithm `{algorithm}`, run {run}: {source}")]
    RunFailure {
        algorithm: String,
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
