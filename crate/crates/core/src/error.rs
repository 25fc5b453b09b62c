use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("duplicate item id `{0}` in catalog")]
    DuplicateItem(String),

    #[error("token {token} at position {position} is not in the item partition")]
    NotAnItem { token: u32, position: usize },

    #[error("unbalanced item markers in response: {0}")]
    UnbalancedMarkers(String),

    #[error("target token {token} at row {row} is masked out")]
    Masked { row: usize, token: usize },

    #[error("token {token} is not permitted while the vocabulary pointer is {pointer}")]
    Automaton { token: u32, pointer: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("prefix of {len} tokens exceeds max position {max}")]
    PrefixTooLong { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged { epoch: usize, step: usize, message: String },

    #[error("need at least {needed} dialogues to split, got {got}")]
    TooFewDialogues { needed: usize, got: usize },

    #[error("no eligible instances: {0}")]
    Empty(String),

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
