use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("edge ({user}, {item}) out of range for {num_users} users x {num_items} items")]
    EdgeOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("({user}, {item}) is not an edge of the graph")]
    NotAnEdge { user: usize, item: usize },
    #[error("invalid edit plan: {0}")]
    InvalidEdit(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("negative sampling failed for user {user}: no unobserved item found after {attempts} attempts")]
    NegativeSampling { user: usize, attempts: usize },
    #[error("graph too dense: could only find {found} of {wanted} non-edges")]
    TooDense { found: usize, wanted: usize },
    #[error("trace is missing layer {0}")]
    MissingLayer(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("{path}:{line}: malformed line: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
