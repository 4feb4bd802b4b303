use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by the tensor engine and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("no template for relation `{relation}` (line {line})")]
    UnknownRelation { relation: String, line: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("{count} candidate descriptions exceed n_max {n_max}")]
    TooManyCandidates { count: usize, n_max: usize },
    #[error("adaptation failed at layer {layer}: {message}")]
    Adaptation { layer: usize, message: String },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header json: {0}")]
    Header(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid example {index}: {message}")]
    Example { index: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("checkpoints diverge at parameter `{0}`")]
    StructureMismatch(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
