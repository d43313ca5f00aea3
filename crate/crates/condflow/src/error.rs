//! Error types, one enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, buffer holds {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{context}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{context}: {detail}")]
    Dimension {
        context: &'static str,
        detail: String,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("loss must reduce to a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no valid pixels in batch; loss undefined")]
    EmptyBatch,
    #[error("class target {class} out of range for {classes} classes")]
    ClassRange { class: u32, classes: usize },
    #[error("cannot stack an empty sample list")]
    EmptyStack,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid network config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("checkpoint missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint parameter {name}: shape {found:?} does not match network shape {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene spec: {0}")]
    SceneSpec(String),
    #[error("non-finite pixel values in input image")]
    NonFinite,
    #[error("l0 smoothing: {0}")]
    L0Param(String),
    #[error("malformed posterior: {0}")]
    Posterior(String),
    #[error("sample contract: {0}")]
    Contract(String),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset {root}: {detail}")]
    Ingestion { root: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("batch mixes sample origins: {0}")]
    MixedOrigin(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("dataset origin mismatch: expected {expected}, sample {id} is {found}")]
    OriginMismatch {
        expected: &'static str,
        found: &'static str,
        id: String,
    },
    #[error("dataset for {0} branch is empty")]
    EmptyDataset(&'static str),
    #[error("batch sample {id}: {detail}")]
    BadSample { id: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("truncated checkpoint: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction shape {pred:?} does not match ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("no pixels with ground truth in [1, {0}] m; metrics undefined")]
    EmptyValidSet(f64),
    #[error("cannot aggregate zero reports")]
    NoReports,
    #[error("aggregate over mixed caps: {0} vs {1}")]
    MixedCaps(f64, f64),
    #[error("metrics csv: {0}")]
    Csv(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config key {key}: {detail}")]
    Value { key: String, detail: String },
    #[error("missing required config key {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}
