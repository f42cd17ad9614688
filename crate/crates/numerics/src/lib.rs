//! Dense tensor arithmetic with a reverse-mode tape.
//!
//! Values are row-major [`Tensor`]s over a [`Real`] scalar (`f32` for
//! training, `f64` for gradient checks). Differentiable computations are
//! recorded on a [`Tape`] and differentiated with [`Tape::backward`].

mod gradcheck;
mod optim;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use real::{cst, Real};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::{
    cross_entropy, dropout, dropout_mask, glorot_bound, glorot_init, layer_norm, leaky_relu,
    matmul, softmax, Tensor, CE_CLAMP, LN_EPS,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
