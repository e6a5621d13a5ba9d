use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("lookup error in column `{column}`: id {id} outside table of {size} rows")]
    Lookup {
        column: String,
        id: usize,
        size: usize,
    },

    #[error("masked_softmax: row {row} has every position masked (zero-length sequence)")]
    FullyMasked { row: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("chronology violated: event at {event_time} is after recommend time {recommend_time}")]
    Chronology { event_time: i64, recommend_time: i64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("AUC undefined: need at least one positive and one negative (got {n_pos} positive, {n_neg} negative)")]
    SingleClass { n_pos: usize, n_neg: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint manifest and blob disagree: {0}")]
    CheckpointInconsistent(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
