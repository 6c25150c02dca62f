use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Wraps `self` with the name of the stage that failed.
    pub fn in_stage(self, stage: impl Into<String>) -> Error {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid target length {0}: must be at least 1")]
    InvalidTargetLength(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frequency scale M = {scale} exceeds the Nyquist ceiling {ceiling} for d_model = {d_model}")]
    Nyquist { scale: f64, ceiling: f64, d_model: usize },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("prefix length {prefix} does not match decoder step {step}")]
    PrefixMismatch { prefix: usize, step: usize },

    #[error("could not draw a realizable example after {0} attempts")]
    Unrealizable(usize),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: model has {model} ids, input uses id {corpus}")]
    VocabMismatch { model: usize, corpus: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
