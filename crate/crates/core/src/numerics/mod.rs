//! Dense tensors, a tape-based reverse-mode differentiator and the few
//! numerical primitives the model is built from.
//!
//! Everything is generic over [`Real`] so the same graph can be evaluated in
//! 32-bit for training and in 64-bit when gradients are being checked.

mod finite_diff;
mod graph;
pub(crate) mod kernels;
mod params;
mod scalar;
mod tensor;

pub use finite_diff::finite_diff_gradient;
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default epsilon for every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`.
///
/// A rank-1 input is treated as a single row.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let cols = x.last_dim();
    if cols < 2 {
        return Err(Error::contract("layer_norm needs at least two features"));
    }
    if eps <= T::zero() {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); x.numel()];
    kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), eps, cols, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Max-subtracted softmax followed by the negative log-likelihood of `label`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::Index {
            what: "cross-entropy label",
            index: label,
            limit: logits.len(),
        });
    }
    Ok(kernels::log_sum_exp(logits) - logits[label])
}

/// Numerically stable softmax of a single vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
