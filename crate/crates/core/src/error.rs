use thiserror::Error;

/// Unified error type for the whole crate. Tensor ops report shape problems
/// with both offending shapes so a failing call site is diagnosable without
/// a debugger; training and data errors carry enough context to be actionable
/// from a log line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGrad { param: String },

    #[error("parameter {param} received no gradient")]
    NoGradient { param: String },

    #[error("optimizer step {step} exceeds total_steps {total}")]
    StepLimit { step: u64, total: u64 },

    #[error("duplicate parameter name {name}")]
    DuplicateParam { name: String },

    #[error("unknown parameter name {name}")]
    UnknownParam { name: String },

    #[error("container: {reason}")]
    Container { reason: String },

    #[error("config: {reason}")]
    Config { reason: String },

    #[error("dataset: {reason}")]
    Data { reason: String },

    #[error("windowing: {reason}")]
    Windowing { reason: String },

    #[error("metric needs both classes present")]
    SingleClass,

    #[error("metric needs at least one positive label")]
    NoPositives,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
