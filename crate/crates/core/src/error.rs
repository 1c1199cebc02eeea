use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("cross_entropy_masked: loss mask has no true entries")]
    EmptyLossMask,

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("token id {id} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { position: usize, id: u32, vocab_size: usize },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("window [{offset}, {end}) overruns split of length {len}")]
    WindowOverrun { offset: usize, end: usize, len: usize },

    #[error("split has {len} tokens, need at least {need}")]
    SplitTooSmall { len: usize, need: usize },

    #[error("zero variance in t-test input: all values equal {value}")]
    ZeroVariance { value: f64 },

    #[error("t-test needs at least 2 values, got {0}")]
    TooFewSamples(usize),

    #[error("conditioning event has zero probability")]
    ImpossibleEvent,

    #[error("enumeration needs {need} states, budget is {budget}")]
    EnumerationBudget { need: u128, budget: u128 },

    #[error("training diverged at iteration {iter} (loss {loss}); last good state at iteration {last_good}")]
    Diverged { iter: usize, loss: f64, last_good: usize },

    #[error("bad {kind} file {path}: {msg}")]
    Format { kind: &'static str, path: PathBuf, msg: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
