use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate.
///
/// Levels in messages are 1-based (level 1 is the finest).
#[derive(Debug, Error)]
pub enum Error {
    #[error("hierarchy needs at least 2 levels, got {0}")]
    TooFewLevels(usize),

    #[error("level sizes must strictly decrease: level {level} has {size} classes, level {next} has {next_size}")]
    NonDecreasingSizes {
        level: usize,
        size: usize,
        next: usize,
        next_size: usize,
    },

    #[error("class {class} at level {level} has no parent at level {}", level + 1)]
    OrphanClass { level: usize, class: usize },

    #[error("class {class} at level {level} has no children at level {}", level - 1)]
    ChildlessParent { level: usize, class: usize },

    #[error("index {index} out of range at level {level} (size {size})")]
    IndexOutOfRange { level: usize, index: usize, size: usize },

    #[error("invalid level {level}: {reason}")]
    InvalidLevel { level: usize, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numerical { op: &'static str },

    #[error("vector is not a probability distribution (sum {sum}, min {min})")]
    NotOnSimplex { sum: f64, min: f64 },

    #[error("label vector is not one-hot")]
    NotOneHot,

    #[error("operation {op} is not available in mode {mode}")]
    ModeMismatch { op: &'static str, mode: String },

    #[error("label chain {chain:?} is inconsistent with the hierarchy")]
    InvalidChain { chain: Vec<usize> },

    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("step {step} outside [0, {max_steps}]")]
    StepOutOfRange { step: usize, max_steps: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("center scales must strictly decrease from coarsest to finest and be positive: {0:?}")]
    InvalidScales(Vec<f64>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: label chain {chain:?} is inconsistent with the hierarchy")]
    InconsistentChain { line: usize, chain: Vec<usize> },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("hierarchy mismatch: {0}")]
    HierarchyMismatch(String),

    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("training failed at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
