use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("segment has {len} content tokens, cap is {cap}")]
    SegmentOverflow { len: usize, cap: usize },
    #[error("conditioning overflow: need {required} positions, have {available}")]
    ConditioningOverflow { required: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("common direction required for this loss variant")]
    MissingDirection,
    #[error("degenerate corpus: mean embedding norm {0:.3e}")]
    DegenerateCorpus(f64),
    #[error("invalid timestep {t} (max {max})")]
    InvalidTimestep { t: usize, max: usize },
    #[error("alpha_{0} is zero; cannot invert")]
    ZeroAlpha(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("training failed: {0}")]
    TrainingFailure(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Codec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
