use alloc::string::String;

use crate::labelspace::ClassId;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {0} is not part of the expected label space")]
    UnknownClass(ClassId),
    #[error("pixel {0} is unlabeled but the loss requires dense labels")]
    UnlabeledPixel(usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {step} out of range (schedule has {steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("forward cache does not belong to this model")]
    StaleCache,
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("checkpoint decode failed: {0}")]
    Checkpoint(String),
    #[error("checkpoint store: {0}")]
    Storage(String),
    #[error("frozen model parameters changed during training")]
    FrozenModelChanged,
}
