//! Dense tensors with a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! addressed through [`Var`] handles that carry the tape epoch they were
//! created in; [`Tape::reset`] starts a new epoch and invalidates them.

mod kernels;
mod real;
mod tape;
mod value;

pub use kernels::{ConvSpec, PoolKind};
pub use real::Real;
pub use tape::{Tape, Var};
pub use value::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: window {window} along {dim} exceeds padded input {padded}")]
    WindowTooLarge {
        op: &'static str,
        dim: &'static str,
        window: usize,
        padded: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("variable from tape epoch {var_epoch} used on epoch {tape_epoch}")]
    StaleVar { var_epoch: u64, tape_epoch: u64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape epoch; reset the tape first")]
    BackwardAlreadyRun,
}
