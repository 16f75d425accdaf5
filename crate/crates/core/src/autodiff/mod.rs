//! Minimal dense reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every batch because each batch carries a
//! different graph topology. Parameters live in a [`ParamStore`]; recording
//! a parameter on a tape snapshots its value, and after
//! [`Tape::backward`] the adjoints are collected with
//! [`Tape::param_grads`].
//!
//! Only the primitives the propagation model needs are provided: row
//! gather (embedding lookup), `x·Wᵀ`, concatenation, elementwise ops,
//! segment softmax, segment weighted sum, and logit cross-entropy.

mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckOptions, GradCheckReport};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{bce_with_logits, sigmoid, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward root must be scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("gradients requested before backward")]
    NoBackward,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}

#[cfg(test)]
mod tests;
