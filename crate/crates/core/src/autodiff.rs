//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it executes. Values live on the tape
//! in `f64`; leaves are copied in from `f32` [`Tensor`]s and gradients are
//! accumulated back into them with [`Gradients::accumulate_into`].
//! `backward` walks the record in exact reverse order.

use crate::error::{Error, Result};
use crate::ops::kern;
use crate::quantization::minmax::MinMaxParams;
use crate::quantization::ste::ternary_pass_through;
use crate::quantization::ternary::{ternary_code, Granularity, THRESHOLD_FACTOR};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Quantize-dequantize with a straight-through gradient scaled per column.
    FakeTernary {
        w: Var,
        alpha: Vec<f64>,
    },
    /// Quantize-dequantize with an identity gradient inside the range.
    FakeQuant8 {
        x: Var,
        clipped: Option<Vec<bool>>,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op,
            detail: format!("expected a 2-D value, got {shape:?}"),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. It is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.to_f64(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.to_f64(), Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// The value as an `f32` tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_f64(n.shape.clone(), &n.value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, p) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = kern::matmul(self.values(a), self.values(b), m, k, p);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, p], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let out = kern::transpose(self.values(a), r, c);
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x), "add_row_bias")?;
        if self.values(bias).len() != c {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.values(bias);
        let out = self.values(x).iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRowBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values(a).iter().map(|v| v * c).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values(a).iter().map(|&v| kern::gelu(v)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let cols = *self.shape(a).last().ok_or(Error::Shape {
            op: "softmax_lastdim",
            detail: "scalar input".into(),
        })?;
        let out = kern::softmax_rows(self.values(a), cols);
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or(Error::Shape {
            op: "layernorm",
            detail: "scalar input".into(),
        })?;
        if self.values(gamma).len() != cols || self.values(beta).len() != cols {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![self.values(gamma).len(), self.values(beta).len()],
            });
        }
        let (y, xhat, rstd) = kern::layernorm_rows(self.values(x), cols, self.values(gamma), self.values(beta));
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Mean softmax cross-entropy over rows of `logits[B × C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.shape(logits), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "classes",
                index: bad,
                len: c,
            });
        }
        let probs = kern::softmax_rows(self.values(logits), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &self.values(logits)[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / b as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `α ∘ Ternarize(W)` in the forward pass, straight-through (scaled by the
    /// detached `α`) in the backward pass.
    pub fn fake_ternary(&mut self, w: Var, granularity: Granularity) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(w), "fake_ternary")?;
        let data = self.values(w);
        let l1: Vec<f64> = match granularity {
            Granularity::ChannelWise => (0..cols)
                .map(|j| (0..rows).map(|k| data[k * cols + j].abs()).sum::<f64>() / rows as f64)
                .collect(),
            Granularity::LayerWise => {
                vec![data.iter().map(|v| v.abs()).sum::<f64>() / (rows * cols) as f64; cols]
            }
        };
        // scales rounded to f32 so the packed/kernel path sees identical values
        let alpha: Vec<f64> = l1.iter().map(|&a| a as f32 as f64).collect();
        let out = data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % cols;
                alpha[j] * ternary_code(v, THRESHOLD_FACTOR * l1[j]) as f64
            })
            .collect();
        let ng = self.needs(w);
        Ok(self.push(vec![rows, cols], out, Op::FakeTernary { w, alpha }, ng))
    }

    /// Min-max 8-bit quantize-dequantize over the whole tensor. With `range`
    /// given the parameters are frozen and out-of-range values clamp.
    pub fn fake_quant8(&mut self, x: Var, range: Option<MinMaxParams>) -> Var {
        let params = range.unwrap_or_else(|| MinMaxParams::from_values(self.values(x).iter().map(|&v| v as f32)));
        let data = self.values(x);
        let out = data.iter().map(|&v| params.fake(v)).collect();
        let clipped = range.map(|p| data.iter().map(|&v| !p.contains(v)).collect());
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::FakeQuant8 { x, clipped }, ng)
    }

    /// Per-output-column min-max 8-bit quantize-dequantize (weights).
    pub fn fake_quant8_columns(&mut self, w: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(w), "fake_quant8_columns")?;
        let data = self.values(w);
        let params: Vec<MinMaxParams> = (0..cols)
            .map(|j| MinMaxParams::from_values((0..rows).map(|k| data[k * cols + j] as f32)))
            .collect();
        let out = data
            .iter()
            .enumerate()
            .map(|(i, &v)| params[i % cols].fake(v))
            .collect();
        let ng = self.needs(w);
        Ok(self.push(vec![rows, cols], out, Op::FakeQuant8 { x: w, clipped: None }, ng))
    }

    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "slice")?;
        if row0 + rows > r || col0 + cols > c {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{row0}+{rows}, {col0}+{cols}] outside {r}x{c}"),
            });
        }
        let src = self.values(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, cols], out, Op::Slice { x, row0, col0 }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = dims2(self.shape(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.shape(p), "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = dims2(self.shape(parts[0]), "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.shape(p), "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.values(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Builds `[B·(P+1) × d]` token rows: per sample the class token followed
    /// by its `P` patch embeddings, plus the positional table.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (bp, d) = dims2(self.shape(patches), "assemble_tokens")?;
        let (n, dp) = dims2(self.shape(pos), "assemble_tokens")?;
        if batch == 0 || bp % batch != 0 || n != bp / batch + 1 || dp != d || self.values(cls).len() != d {
            return Err(Error::Dimension {
                op: "assemble_tokens",
                lhs: self.shape(patches).to_vec(),
                rhs: self.shape(pos).to_vec(),
            });
        }
        let p = bp / batch;
        let (pv, cv, posv) = (self.values(patches), self.values(cls), self.values(pos));
        let mut out = Vec::with_capacity(batch * n * d);
        for b in 0..batch {
            for t in 0..n {
                for c in 0..d {
                    let base = if t == 0 { cv[c] } else { pv[(b * p + t - 1) * d + c] };
                    out.push(base + posv[t * d + c]);
                }
            }
        }
        let ng = self.needs(patches) || self.needs(cls) || self.needs(pos);
        Ok(self.push(
            vec![batch * n, d],
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "rows",
                index: bad,
                len: r,
            });
        }
        let src = self.values(x);
        let out = rows
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let ng = self.needs(x);
        Ok(self.push(vec![rows.len(), c], out, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Reverse pass from a scalar `loss`. Every differentiable leaf gets an
    /// entry, zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: &dyn Fn(usize) -> f64, len: usize| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += delta(i);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let p = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let bt = kern::transpose(&self.nodes[b.0].value, k, p);
                    let da = kern::matmul(g, &bt, m, p, k);
                    acc(*a, &|i| da[i], m * k);
                }
                if self.nodes[b.0].needs_grad {
                    let at = kern::transpose(&self.nodes[a.0].value, m, k);
                    let db = kern::matmul(&at, g, k, m, p);
                    acc(*b, &|i| db[i], k * p);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let ga = kern::transpose(g, c, r);
                acc(*a, &|i| ga[i], r * c);
            }
            Op::Add(a, b) => {
                acc(*a, &|i| g[i], g.len());
                acc(*b, &|i| g[i], g.len());
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, &|i| g[i], g.len());
                let c = self.nodes[bias.0].value.len();
                let mut gb = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    gb[i % c] += v;
                }
                acc(*bias, &|i| gb[i], c);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &|i| g[i] * bv[i], g.len());
                acc(*b, &|i| g[i] * av[i], g.len());
            }
            Op::Scale(a, c) => acc(*a, &|i| g[i] * c, g.len()),
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &|i| g[i] * kern::gelu_grad(av[i]), g.len());
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *node.shape.last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        ga[i] = y[i] * (g[i] - dot);
                    }
                }
                acc(*a, &|i| ga[i], ga.len());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = *node.shape.last().unwrap();
                let gv = &self.nodes[gamma.0].value;
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / cols {
                    let s = r * cols;
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = g[s + c] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[s + c];
                        ggamma[c] += g[s + c] * xhat[s + c];
                        gbeta[c] += g[s + c];
                    }
                    let n = cols as f64;
                    for c in 0..cols {
                        let dh = g[s + c] * gv[c];
                        gx[s + c] = rstd[r] / n * (n * dh - sum_dh - xhat[s + c] * sum_dh_h);
                    }
                }
                acc(*x, &|i| gx[i], gx.len());
                acc(*gamma, &|i| ggamma[i], cols);
                acc(*beta, &|i| gbeta[i], cols);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, &|_| g[0], n);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let gl: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let hit = if labels[i / c] == i % c { 1.0 } else { 0.0 };
                        (p - hit) * scale
                    })
                    .collect();
                acc(*logits, &|i| gl[i], gl.len());
            }
            Op::FakeTernary { w, alpha } => {
                let cols = node.shape[1];
                let gw = ternary_pass_through(g, alpha, cols);
                acc(*w, &|i| gw[i], gw.len());
            }
            Op::FakeQuant8 { x, clipped } => match clipped {
                None => acc(*x, &|i| g[i], g.len()),
                Some(mask) => acc(*x, &|i| if mask[i] { 0.0 } else { g[i] }, g.len()),
            },
            Op::Slice { x, row0, col0 } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let (sr, sc) = (node.shape[0], node.shape[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..sr {
                    for j in 0..sc {
                        gx[(row0 + i) * c + col0 + j] = g[i * sc + j];
                    }
                }
                acc(*x, &|i| gx[i], gx.len());
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    let o = off;
                    acc(*p, &|i| g[(i / w) * total + o + i % w], rows * w);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let o = off;
                    acc(*p, &|i| g[o + i], n);
                    off += n;
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = node.shape[1];
                let n = node.shape[0] / batch;
                let p = n - 1;
                acc(
                    *patches,
                    &|i| {
                        let (row, c) = (i / d, i % d);
                        let (b, t) = (row / p, row % p);
                        g[(b * n + t + 1) * d + c]
                    },
                    batch * p * d,
                );
                let mut gc = vec![0.0; d];
                let mut gp = vec![0.0; n * d];
                for b in 0..*batch {
                    for t in 0..n {
                        for c in 0..d {
                            let v = g[(b * n + t) * d + c];
                            gp[t * d + c] += v;
                            if t == 0 {
                                gc[c] += v;
                            }
                        }
                    }
                }
                acc(*cls, &|i| gc[i], d);
                acc(*pos, &|i| gp[i], n * d);
            }
            Op::SelectRows { x, rows } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut gx = vec![0.0; r * c];
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[row * c + j] += g[k * c + j];
                    }
                }
                acc(*x, &|i| gx[i], gx.len());
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Err(Error::Contract(format!("no gradient recorded for tape value {}", v.0))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sum_gives_ones() {
        let mut w = param(&[3], vec![1.0, -2.0, 5.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap().accumulate_into(v, &mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares() {
        let mut w = param(&[2], vec![1.0, -2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(v, &mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[1.0, -2.0]);
        // a second backward accumulates
        grads.accumulate_into(v, &mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[2.0, -4.0]);
        w.zero_grad();
        assert_eq!(w.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let v = tape.leaf(&param(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(&param(&[2], vec![1.0, 2.0]));
        let b = tape.leaf(&param(&[3], vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::ones(&[2]));
        let b = tape.leaf(&param(&[2], vec![1.0, 2.0]));
        let m = tape.mul(a, b).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let run = || {
            let mut t = Tape::new();
            let (x, y) = (t.leaf(&a), t.leaf(&b));
            let m = t.matmul(x, y).unwrap();
            let s = t.softmax_lastdim(m).unwrap();
            t.value(s)
        };
        let (r1, r2) = (run(), run());
        assert!(r1.data().iter().zip(r2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
