//! Ternary and 8-bit GEMM kernels.
//!
//! Weights are consumed in their packed, channel-contiguous form. For each
//! output channel the kernel forms `Σ_{t=+1} x − Σ_{t=−1} x` and multiplies by
//! `α_j` once. On the 8-bit path the raw `u8` activation codes are
//! accumulated in `i32` and the activation offset is folded in afterwards:
//! `Σ_k (c_k·s + x_min)·t_k = s·Σ c_k·t_k + x_min·Σ t_k`.
//!
//! Work is split across output channels; every reduction runs sequentially
//! over `k`, so outputs are bit-identical from run to run.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantization::minmax::{ChannelQuantized8, QuantizedActivation};
use crate::quantization::pack::{decode, packed_len, CODES_PER_BYTE};
use crate::quantization::ternary::TernaryTensor;
use crate::quantization::{quantize_minmax8, quantize_minmax8_columns, ternarize};
use crate::tensor::Tensor;

/// Largest `k` for which `255·k` fits in an `i32` accumulator.
pub const MAX_I8_DEPTH: usize = 1 << 23;

pub const CSV_HEADER: &str = "m,k,n,kernel,reps,ns_per_call,eff_gflops,weight_bytes";

/// Writes the codes of channel `j` (rows `0..k`) into `buf`.
fn decode_channel(w: &TernaryTensor, j: usize, buf: &mut [i8]) -> Result<()> {
    let k = w.rows();
    let packed = w.packed();
    let start = j * k;
    for (r, slot) in buf.iter_mut().enumerate() {
        let idx = start + r;
        let byte = packed[idx / CODES_PER_BYTE];
        *slot = decode((byte >> (2 * (idx % CODES_PER_BYTE))) & 0b11)?;
    }
    Ok(())
}

/// `Σ x_r·t_r` in `f64` over eight independent lanes; `t ∈ {−1, 0, 1}`, so
/// each product is exact.
fn signed_sum(x: &[f32], codes: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let xs = x.chunks_exact(8);
    let ts = codes.chunks_exact(8);
    let (xr, tr) = (xs.remainder(), ts.remainder());
    for (xc, tc) in xs.zip(ts) {
        for l in 0..8 {
            lanes[l] += xc[l] as f64 * tc[l] as f64;
        }
    }
    let tail: f64 = xr.iter().zip(tr).map(|(&a, &b)| a as f64 * b as f64).sum();
    lanes.iter().sum::<f64>() + tail
}

fn check_inner(op: &'static str, lhs: &[usize], k: usize, w: [usize; 2]) -> Result<usize> {
    match lhs {
        &[m, kk] if kk == k => Ok(m),
        _ => Err(Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: w.to_vec(),
        }),
    }
}

/// Gathers per-channel output columns into a row-major `[m × n]` tensor.
fn assemble(m: usize, columns: Vec<Vec<f32>>) -> Tensor {
    let n = columns.len();
    let mut out = vec![0.0f32; m * n];
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            out[i * n + j] = v;
        }
    }
    Tensor::new(vec![m, n], out).expect("shape is consistent")
}

/// `x[m×k] · dequantize(w)[k×n]` without materializing the dense weights.
pub fn ternary_gemm_f32(x: &Tensor, w: &TernaryTensor) -> Result<Tensor> {
    let m = check_inner("ternary_gemm_f32", x.shape(), w.rows(), w.shape())?;
    let k = w.rows();
    let xd = x.data();
    let alpha = w.alpha();
    let columns = (0..w.cols())
        .into_par_iter()
        .map(|j| {
            let mut codes = vec![0i8; k];
            decode_channel(w, j, &mut codes)?;
            let codes: Vec<f32> = codes.into_iter().map(f32::from).collect();
            let a = alpha[j] as f64;
            Ok((0..m)
                .map(|i| {
                    let row = &xd[i * k..(i + 1) * k];
                    (a * signed_sum(row, &codes)) as f32
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    Ok(assemble(m, columns))
}

/// 8-bit activations times ternary weights with integer accumulation.
pub fn ternary_gemm_i8(xq: &QuantizedActivation, w: &TernaryTensor) -> Result<Tensor> {
    let m = check_inner("ternary_gemm_i8", xq.shape(), w.rows(), w.shape())?;
    let k = w.rows();
    if k > MAX_I8_DEPTH {
        return Err(Error::Contract(format!(
            "inner dimension {k} exceeds the i32 accumulator bound {MAX_I8_DEPTH}"
        )));
    }
    let xc = xq.codes();
    let (s, x_min) = (xq.scale() as f64, xq.offset() as f64);
    let alpha = w.alpha();
    let columns = (0..w.cols())
        .into_par_iter()
        .map(|j| {
            let mut codes = vec![0i8; k];
            decode_channel(w, j, &mut codes)?;
            let code_sum: i32 = codes.iter().map(|&t| t as i32).sum();
            let a = alpha[j] as f64;
            Ok((0..m)
                .map(|i| {
                    let row = &xc[i * k..(i + 1) * k];
                    let acc: i32 = row.iter().zip(&codes).map(|(&c, &t)| c as i32 * t as i32).sum();
                    (a * (s * acc as f64 + x_min * code_sum as f64)) as f32
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    Ok(assemble(m, columns))
}

/// `x[m×k]` times per-column 8-bit weights, weights dequantized on the fly.
pub fn int8_gemm_f32(x: &Tensor, w: &ChannelQuantized8) -> Result<Tensor> {
    let [k, n] = w.shape();
    let m = check_inner("int8_gemm_f32", x.shape(), k, w.shape())?;
    let (xd, wc) = (x.data(), w.codes());
    let (scales, offsets) = (w.scales(), w.offsets());
    let columns = (0..n)
        .into_par_iter()
        .map(|j| {
            let (sw, ow) = (scales[j] as f64, offsets[j] as f64);
            (0..m)
                .map(|i| {
                    let mut acc = 0.0f64;
                    for kk in 0..k {
                        acc += xd[i * k + kk] as f64 * (wc[kk * n + j] as f64 * sw + ow);
                    }
                    acc as f32
                })
                .collect()
        })
        .collect();
    Ok(assemble(m, columns))
}

/// 8-bit activations times per-column 8-bit weights. Both offsets are folded
/// analytically around an integer `Σ c_x·c_w`.
pub fn int8_gemm_i8(xq: &QuantizedActivation, w: &ChannelQuantized8) -> Result<Tensor> {
    let [k, n] = w.shape();
    let m = check_inner("int8_gemm_i8", xq.shape(), k, w.shape())?;
    let (xc, wc) = (xq.codes(), w.codes());
    let (sx, ox) = (xq.scale() as f64, xq.offset() as f64);
    let (scales, offsets) = (w.scales(), w.offsets());
    let row_sums: Vec<i64> = (0..m)
        .map(|i| xc[i * k..(i + 1) * k].iter().map(|&c| c as i64).sum())
        .collect();
    let columns = (0..n)
        .into_par_iter()
        .map(|j| {
            let col: Vec<u8> = (0..k).map(|kk| wc[kk * n + j]).collect();
            let col_sum: i64 = col.iter().map(|&c| c as i64).sum();
            let (sw, ow) = (scales[j] as f64, offsets[j] as f64);
            (0..m)
                .map(|i| {
                    let dot: i64 = xc[i * k..(i + 1) * k]
                        .iter()
                        .zip(&col)
                        .map(|(&a, &b)| a as i64 * b as i64)
                        .sum();
                    let v = sx * sw * dot as f64
                        + sx * ow * row_sums[i] as f64
                        + ox * sw * col_sum as f64
                        + k as f64 * ox * ow;
                    v as f32
                })
                .collect()
        })
        .collect();
    Ok(assemble(m, columns))
}

/// Plain dense `f32` GEMM, used as the benchmark baseline.
pub fn dense_gemm_f32(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (k, n) = w.dims2("dense_gemm_f32")?;
    let m = check_inner("dense_gemm_f32", x.shape(), k, [k, n])?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let a = xd[i * k + kk];
            for (o, &b) in row.iter_mut().zip(&wd[kk * n..(kk + 1) * n]) {
                *o += a * b;
            }
        }
    });
    Tensor::new(vec![m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    DenseF32,
    TernaryF32,
    TernaryI8,
    Int8I8,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::DenseF32,
        KernelKind::TernaryF32,
        KernelKind::TernaryI8,
        KernelKind::Int8I8,
    ];

    /// Bytes occupied by a `k×n` weight matrix in this kernel's format.
    pub fn weight_bytes(self, k: usize, n: usize) -> usize {
        match self {
            KernelKind::DenseF32 => 4 * k * n,
            KernelKind::TernaryF32 | KernelKind::TernaryI8 => packed_len(k * n) + 4 * n,
            KernelKind::Int8I8 => k * n + 8 * n,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::DenseF32 => "dense_f32",
            KernelKind::TernaryF32 => "ternary_f32",
            KernelKind::TernaryI8 => "ternary_i8",
            KernelKind::Int8I8 => "int8_i8",
        })
    }
}

/// Accumulator used by a kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accumulator {
    F32,
    F64,
    I32,
    I64,
}

/// One benchmark configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedGemmPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub kernel: KernelKind,
    /// Output channels handed to one worker at a time.
    pub tile_n: usize,
    pub seed: u64,
}

impl PackedGemmPlan {
    pub fn new(m: usize, k: usize, n: usize, kernel: KernelKind) -> Result<Self> {
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::config("bench.shapes", format!("zero dimension in {m}x{k}x{n}")));
        }
        if matches!(kernel, KernelKind::TernaryI8) && k > MAX_I8_DEPTH {
            return Err(Error::config(
                "bench.shapes",
                format!("k = {k} exceeds {MAX_I8_DEPTH} for integer accumulation"),
            ));
        }
        Ok(Self {
            m,
            k,
            n,
            kernel,
            tile_n: 1,
            seed: 42,
        })
    }

    pub fn accumulator(&self) -> Accumulator {
        match self.kernel {
            KernelKind::DenseF32 => Accumulator::F32,
            KernelKind::TernaryF32 => Accumulator::F64,
            KernelKind::TernaryI8 => Accumulator::I32,
            KernelKind::Int8I8 => Accumulator::I64,
        }
    }

    pub fn flops(&self) -> f64 {
        2.0 * (self.m * self.k * self.n) as f64
    }
}

/// One CSV row of benchmark output.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub kernel: KernelKind,
    pub reps: usize,
    pub ns_per_call: f64,
    pub eff_gflops: f64,
    pub weight_bytes: usize,
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{:.1},{:.4},{}",
            self.m, self.k, self.n, self.kernel, self.reps, self.ns_per_call, self.eff_gflops, self.weight_bytes
        )
    }
}

/// Operands for a plan, generated from its seed.
pub struct Workload {
    pub x: Tensor,
    pub xq: QuantizedActivation,
    pub w: Tensor,
    pub wt: TernaryTensor,
    pub w8: ChannelQuantized8,
}

impl Workload {
    pub fn new(plan: &PackedGemmPlan) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let x = Tensor::randn(&[plan.m, plan.k], 1.0, &mut rng);
        let w = Tensor::randn(&[plan.k, plan.n], 0.05, &mut rng);
        Ok(Self {
            xq: quantize_minmax8(&x)?,
            wt: ternarize(&w)?,
            w8: quantize_minmax8_columns(&w)?,
            x,
            w,
        })
    }

    pub fn run(&self, kernel: KernelKind) -> Result<Tensor> {
        match kernel {
            KernelKind::DenseF32 => dense_gemm_f32(&self.x, &self.w),
            KernelKind::TernaryF32 => ternary_gemm_f32(&self.x, &self.wt),
            KernelKind::TernaryI8 => ternary_gemm_i8(&self.xq, &self.wt),
            KernelKind::Int8I8 => int8_gemm_i8(&self.xq, &self.w8),
        }
    }
}

/// Times `reps` calls of the plan's kernel on a seeded workload.
pub fn bench(plan: &PackedGemmPlan, reps: usize) -> Result<BenchRow> {
    if reps == 0 {
        return Err(Error::config("bench.reps", "must be at least 1"));
    }
    let work = Workload::new(plan)?;
    // warm-up call, not timed
    std::hint::black_box(work.run(plan.kernel)?);
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(work.run(plan.kernel)?);
    }
    let ns = start.elapsed().as_nanos() as f64 / reps as f64;
    Ok(BenchRow {
        m: plan.m,
        k: plan.k,
        n: plan.n,
        kernel: plan.kernel,
        reps,
        ns_per_call: ns,
        eff_gflops: if ns > 0.0 { plan.flops() / ns } else { 0.0 },
        weight_bytes: plan.kernel.weight_bytes(plan.k, plan.n),
    })
}

/// The `(m, k, n)` GEMMs of one transformer block for a batch of `batch`
/// images: q/k/v/proj, fc1 and fc2.
pub fn model_gemm_shapes(config: &crate::model::ViTConfig, batch: usize) -> Vec<(usize, usize, usize)> {
    let m = batch * config.num_tokens();
    let (d, h) = (config.embed_dim, config.hidden_dim());
    vec![(m, d, d), (m, d, h), (m, h, d)]
}
