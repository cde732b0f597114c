//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation in execution order, so
//! node indices are already a topological order. [`Tape::backward`] walks the
//! tape once in reverse and accumulates gradients into every trainable leaf.
//!
//! The kernel set is the one a GPT-style decoder needs: matrix products,
//! broadcast bias adds, layer normalization, tanh-approximated GELU, softmax,
//! embedding gathers, fused causal self-attention and a fused
//! log-softmax/NLL cross-entropy.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Precision, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
}
