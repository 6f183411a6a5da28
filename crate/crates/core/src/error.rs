use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("window [{start}, {end}] exceeds stream duration {duration}")]
    Range { start: f64, end: f64, duration: f64 },

    #[error("transcript {index} of window starting at {s_begin} is empty")]
    EmptyTranscript { index: usize, s_begin: f64 },

    #[error("frame sampling failed: segment {segment} [{start}, {end}) holds no stored frame")]
    Sampling { segment: usize, start: f64, end: f64 },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("invalid label: {0}")]
    Label(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at batch {batch_id}: {detail}")]
    NonFiniteLoss { batch_id: u64, detail: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Distinct failure modes when reading a checkpoint archive.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch: header {expected}, payload {found}")]
    Checksum { expected: String, found: String },

    #[error("tensor {name}: shape {shape:?} disagrees with stored extent {bytes} bytes")]
    Shape {
        name: String,
        shape: Vec<usize>,
        bytes: usize,
    },

    #[error("dtype mismatch: checkpoint holds {found}, reader expects {expected}")]
    Dtype { found: String, expected: String },

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("missing tensor {0}")]
    Missing(String),
}
