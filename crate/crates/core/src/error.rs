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

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("capacity exceeded: requested {requested}, maximum {max}")]
    Capacity { requested: usize, max: usize },

    #[error("sequence length {len} exceeds limit {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("context of {len} tokens plus {memory} memory tokens exceeds limit {max}; refusing to truncate")]
    Truncation { len: usize, memory: usize, max: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("compression ratio undefined for zero memory tokens")]
    ZeroMemory,

    #[error("cannot split a context of {0} tokens into two nonempty segments")]
    Split(usize),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint format version {found} is incompatible (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing required field `{field}`")]
    Schema {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
