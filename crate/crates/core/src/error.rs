use thiserror::Error;

pub type Result<T> = std::result::Result<T, SelmixError>;

#[derive(Debug, Error)]
pub enum SelmixError {
    #[error("empty evaluation set")]
    EmptyEvaluationSet,

    #[error("class {0} absent from evaluation set")]
    ClassAbsent(usize),

    #[error("no validation samples for class {0}")]
    EmptyClass(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("metric gradient undefined at zero recall")]
    ZeroRecall,

    #[error("regularizer moment diverges (requires alpha > 1 and beta > 1)")]
    RegularizerMomentDiverges,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SelmixError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SelmixError::InvalidArgument(msg.into())
    }
}
