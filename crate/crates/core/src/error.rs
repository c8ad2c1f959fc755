use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{total} classes cannot be split evenly into {folds} folds")]
    RaggedFolds { total: usize, folds: usize },

    #[error("fold index {index} out of range for {folds} folds")]
    FoldOutOfRange { index: usize, folds: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask has no foreground pixel")]
    EmptyMask,

    #[error("no class in the pool has {needed} images for a {shots}-shot episode")]
    NoEligibleClass { shots: usize, needed: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} exceeds the largest valid id {max}")]
    LabelOutOfRange { label: usize, max: usize },

    #[error("base learner needs at least one base class")]
    NoBaseClasses,

    #[error("input {height}x{width} is smaller than the 32x32 minimum")]
    ImageTooSmall { height: usize, width: usize },

    #[error("{shots} shots are not divisible by the reduction factor {reduction}")]
    ShotReduction { shots: usize, reduction: usize },

    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage} diverged at step {step} (loss {loss})")]
    Diverged {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("prediction has no id-translation table")]
    MissingTable,
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
