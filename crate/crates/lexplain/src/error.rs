use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input text")]
    EmptyInput,
    #[error("unknown split point '{requested}', valid layers: {valid:?}")]
    UnknownSplitPoint { requested: String, valid: Vec<String> },
    #[error("model has no CLS-style special first token")]
    MissingClsToken,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("KernelSHAP needs at least 2 interpretable units, got {0}")]
    TooFewUnits(usize),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("unknown attribution method '{0}'")]
    UnknownMethod(String),
    #[error("pipeline contract violated in stage '{stage}': {detail}")]
    PipelineContract { stage: String, detail: String },
    #[error("attribution result has no units")]
    EmptyResult,
    #[error("insufficient data: need at least {need} rows, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("activations contain NaN or infinite values")]
    InvalidActivations,
    #[error("training diverged (loss became NaN) at step {0}")]
    TrainingDiverged(usize),
    #[error("operation unsupported for task {0}")]
    UnsupportedTask(String),
    #[error("stability metric requires a second concept model")]
    MissingCounterpart,
    #[error("labeling client unavailable: {0}")]
    LabelingUnavailable(String),
    #[error("unrecognized {kind} file: {detail}")]
    BadFileFormat { kind: String, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
