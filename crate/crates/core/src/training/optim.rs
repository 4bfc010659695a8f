//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight decay applies to matrices only; biases, norm affine parameters,
/// the class token and positional embeddings are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Cosine decay from `base` towards zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: AdamWState {
                step: 0,
                moments: BTreeMap::new(),
            },
        }
    }

    /// One update of every parameter that carries a gradient:
    ///
    /// `θ ← θ − lr·λ·θ − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>, lr: f64) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params {
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let mom = self.state.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            if mom.m.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "AdamW::step",
                    lhs: mom.m.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            let wd = if decays(&name) { self.weight_decay } else { 0.0 };
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let th = *theta as f64;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *theta = (th - lr * wd * th - lr * update) as f32;
            }
        }
        Ok(())
    }
}
