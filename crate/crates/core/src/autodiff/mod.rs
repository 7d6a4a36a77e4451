//! Reverse-mode differentiation over dense `f64` tensors, plus the Adam
//! optimiser used to train the policy.
//!
//! Build a [`Tape`] per forward pass, call [`Tape::backward`] on a scalar
//! loss, then move the parameter gradients into a [`ParamStore`] with
//! [`Gradients::accumulate_into`].

mod adam;
pub mod numeric;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Primitive, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} has a zero-length axis")]
    BadShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{kind}: {reason}")]
    InvalidArgument { kind: &'static str, reason: String },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("target action {target} out of range for {classes} logits")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
}

/// `-log softmax(logits)[target]` for a single logit vector.
pub fn cross_entropy_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    target: usize,
) -> Result<Var, AutodiffError> {
    let rows = tape::dims2(tape.shape(logits)).0;
    if rows != 1 {
        return Err(AutodiffError::ShapeMismatch {
            kind: "cross_entropy",
            shapes: vec![tape.shape(logits).to_vec()],
        });
    }
    tape.cross_entropy(logits, vec![target], vec![1.0])
}
