//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor math, codecs, the autodiff engine, and the trainer.
#[derive(Debug, Error)]
pub enum ActError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty tensor not allowed in {0}")]
    EmptyTensor(String),

    #[error("invalid bit width {0}: expected 1..=16 or 32")]
    InvalidBitWidth(u8),

    #[error("invalid group size {0}: must be >= 2")]
    InvalidGroupSize(usize),

    #[error("corrupted quantized payload: {0}")]
    CorruptedPayload(String),

    #[error("missing context slot {0}")]
    MissingSlot(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid mask: entries must be 0 or 1")]
    InvalidMask,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("infeasible bit budget: need at least {needed} bits, budget is {budget}")]
    InfeasibleBudget { needed: u64, budget: u64 },

    #[error("allocation problem mismatch: {0}")]
    ProblemMismatch(String),

    #[error("too many slots for exhaustive search: {0} > 8")]
    TooManySlots(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    BadFormat(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ActError>;
