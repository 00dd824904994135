use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] capdiff_autodiff::Error),

    #[error("vocabulary needs at least 2 entries, got {0}")]
    VocabTooSmall(usize),

    #[error("word index {index} outside vocabulary of size {size}")]
    WordIndex { index: usize, size: usize },

    #[error("time {0} outside [0, 1]")]
    TimeRange(f64),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("reverse step needs s' <= t', got s'={s} t'={t}")]
    StepOrder { s: f64, t: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("objects required, got K=0")]
    NoObjects,

    #[error("conditioning: {0}")]
    Conditioning(String),

    #[error("label smoothing must lie in [0, 1), got {0}")]
    Smoothing(f64),

    #[error("empty sentence pool")]
    EmptyPool,

    #[error("no retrievable sentence once sample {0} is excluded")]
    PoolExhausted(u64),

    #[error("unknown sample id {0}")]
    UnknownSample(u64),

    #[error("sample {0} has no references")]
    NoReferences(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
