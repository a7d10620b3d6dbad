//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is deliberately narrow: what a windowed-attention encoder, a
//! convolutional decoder (via im2col gathers) and the usual losses need. Every
//! value lives in 64-bit floating point so finite-difference checks are tight.

mod graph;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var, GATHER_ZERO};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[cfg(test)]
mod tests;
