//! Elementary dense operations.
//!
//! The slice kernels in [`kern`] compute in `f64` and are shared by the eager
//! [`Tensor`] functions below and by the autodiff tape. Accumulation order per
//! output element is fixed, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

pub(crate) mod kern {
    use super::LAYERNORM_EPS;

    /// `a[m×k] · b[k×p]`, accumulated over `k` in index order.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &mut out[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * p..(kk + 1) * p];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        out
    }

    pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        out
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_K: f64 = 0.044_715;

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let u = GELU_C * (x + GELU_K * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    /// Row-wise normalization. Returns `(y, xhat, rstd)`; `xhat` and `rstd`
    /// are kept for the backward pass.
    pub fn layernorm_rows(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let rows = x.len() / cols;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for c in 0..cols {
                let h = (row[c] - mean) * rstd;
                xhat[r * cols + c] = h;
                y[r * cols + c] = h * gamma[c] + beta[c];
            }
            rstds.push(rstd);
        }
        (y, xhat, rstds)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Value {
            op,
            detail: "input contains non-finite values".into(),
        })
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, p) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = kern::matmul(&a.to_f64(), &b.to_f64(), m, k, p);
    Ok(Tensor::from_f64(vec![m, p], &out))
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    check_finite("softmax_lastdim", x)?;
    let cols = *x.shape().last().ok_or(Error::Shape {
        op: "softmax_lastdim",
        detail: "scalar input".into(),
    })?;
    let out = kern::softmax_rows(&x.to_f64(), cols);
    Ok(Tensor::from_f64(x.shape().to_vec(), &out))
}

/// Elementwise GeLU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| kern::gelu(v as f64)).collect();
    Tensor::from_f64(x.shape().to_vec(), &out)
}

/// Layer normalization over the last dimension (biased variance, eps 1e-5).
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let cols = *x.shape().last().ok_or(Error::Shape {
        op: "layernorm",
        detail: "scalar input".into(),
    })?;
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::Dimension {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: vec![gamma.len(), beta.len()],
        });
    }
    let (y, _, _) = kern::layernorm_rows(&x.to_f64(), cols, &gamma.to_f64(), &beta.to_f64());
    Ok(Tensor::from_f64(x.shape().to_vec(), &y))
}
