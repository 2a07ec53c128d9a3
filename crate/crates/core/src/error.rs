use std::path::PathBuf;

use thiserror::Error;

/// Shape, index and contract violations raised by tensor operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: id {id} at position {position} is outside [0, {bound})")]
    IndexOutOfRange {
        op: &'static str,
        id: usize,
        position: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// Invalid model or training configuration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("model dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("{field} must be {requirement}, got {value}")]
    Invalid {
        field: &'static str,
        requirement: &'static str,
        value: String,
    },
    #[error("unknown variant `{0}` (expected one of: roformer, joformer-fixed, joformer-per-token)")]
    UnknownVariant(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
}

/// Failures of the model forward pass.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sequence length {len} exceeds the context length {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Corpus and vocabulary problems.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source} (check the path or pass --url to download the corpus)")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to download {url}: {message} (check network access, or download the file manually and pass its path)")]
    Fetch { url: String, message: String },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus `{0}` is empty")]
    Empty(String),
    #[error("non-ASCII character {ch:?} at offset {offset}")]
    NonAscii { ch: char, offset: usize },
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    UnknownChar { ch: char, offset: usize },
    #[error("id {id} at offset {offset} is not in the vocabulary")]
    UnknownId { id: usize, offset: usize },
    #[error("split of length {len} is too short for sequences of length {seq_len}")]
    TooShort { len: usize, seq_len: usize },
}

/// Checkpoint and metrics file format errors.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint parameter {index}: expected `{expected}` {expected_shape:?}, found `{found}` {found_shape:?}")]
    ParameterMismatch {
        index: usize,
        expected: String,
        expected_shape: Vec<usize>,
        found: String,
        found_shape: Vec<usize>,
    },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Failures during a training run.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: usize, lr: f64, loss: f64 },
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
}
