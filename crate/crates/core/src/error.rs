use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("too many {what}: {got} exceeds limit {limit}")]
    TooMany {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("degenerate 6D rotation: second column is parallel to the first (residual {0:e})")]
    DegenerateRotation(f64),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("scripted expert failed on task `{task}` (seed {seed}): {reason}")]
    ExpertFailure {
        task: String,
        seed: u64,
        reason: String,
    },

    #[error("embodiment mismatch: expected `{expected}`, found `{found}`")]
    EmbodimentMismatch { expected: String, found: String },

    #[error("parameter prefix violation: {0}")]
    PrefixSet(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("corrupt blob: {0}")]
    Blob(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
