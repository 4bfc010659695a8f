//! Straight-through gradient rules for the quantizers.

use super::ternary::{scales, Granularity};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `dW[k, j] = g[k, j] · α_j` with `α` detached.
pub(crate) fn ternary_pass_through(upstream: &[f64], alpha: &[f64], cols: usize) -> Vec<f64> {
    upstream.iter().enumerate().map(|(i, g)| g * alpha[i % cols]).collect()
}

/// Gradient of `α ∘ Ternarize(W)` w.r.t. the latent weights: ternarize acts
/// as the identity and the scale is treated as a constant.
pub fn ste_backward_ternarize(upstream_grad: &Tensor, w: &Tensor) -> Result<Tensor> {
    ste_backward_ternarize_with(upstream_grad, w, Granularity::ChannelWise)
}

pub fn ste_backward_ternarize_with(upstream_grad: &Tensor, w: &Tensor, granularity: Granularity) -> Result<Tensor> {
    if upstream_grad.shape() != w.shape() {
        return Err(Error::Dimension {
            op: "ste_backward_ternarize",
            lhs: upstream_grad.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (rows, cols) = w.dims2("ste_backward_ternarize")?;
    let (alpha, _) = scales(w, rows, cols, granularity);
    let g = ternary_pass_through(&upstream_grad.to_f64(), &alpha, cols);
    Ok(Tensor::from_f64(w.shape().to_vec(), &g))
}

/// Round is treated as the identity. The min-max affine maps cancel, so the
/// whole quantize-dequantize step passes the gradient through unchanged.
pub fn ste_backward_round(upstream_grad: &Tensor) -> Tensor {
    upstream_grad.clone()
}
