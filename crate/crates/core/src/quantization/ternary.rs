//! Channel-wise weight ternarization.
//!
//! For a weight matrix `W[n_w × d_out]` each output column `j` gets its own
//! threshold `Δ_j = 0.7·‖W[:,j]‖₁ / n_w` and scale `α_j = ‖W[:,j]‖₁ / n_w`.
//! Codes follow the half-open bins `W < −Δ → −1`, `−Δ ≤ W < Δ → 0`,
//! `W ≥ Δ → +1`.

use serde::{Deserialize, Serialize};

use super::pack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const THRESHOLD_FACTOR: f64 = 0.7;

/// How many scale/threshold pairs a matrix gets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One `(Δ, α)` per output column.
    #[default]
    #[serde(alias = "channel")]
    ChannelWise,
    /// One `(Δ, α)` for the whole matrix (the TWN baseline).
    #[serde(alias = "layer")]
    LayerWise,
}

/// Ternary weights: packed codes plus per-channel scales.
///
/// Codes are stored column-major (channel-contiguous) in the 2-bit layout of
/// [`pack`]. Layer-wise tensors repeat their single scale in every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryTensor {
    rows: usize,
    cols: usize,
    packed: Vec<u8>,
    alpha: Vec<f32>,
    thresholds: Vec<f32>,
}

/// Code for one weight given its channel threshold.
#[inline]
pub fn ternary_code(w: f64, delta: f64) -> i8 {
    if delta == 0.0 {
        // Δ = 0 only for an all-zero channel.
        0
    } else if w < -delta {
        -1
    } else if w < delta {
        0
    } else {
        1
    }
}

fn check_weights(w: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let dims = w.dims2(op)?;
    if !w.is_finite() {
        return Err(Error::Value {
            op,
            detail: "weights contain non-finite values".into(),
        });
    }
    Ok(dims)
}

fn column_l1(w: &Tensor, j: usize) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows).map(|k| (w.data()[k * cols + j] as f64).abs()).sum()
}

/// `Δ_j = 0.7 · ‖W[:,j]‖₁ / n_w`.
pub fn channel_threshold(w: &Tensor, j: usize) -> Result<f32> {
    let (rows, cols) = w.dims2("channel_threshold")?;
    if j >= cols {
        return Err(Error::Index {
            what: "weight channels",
            index: j,
            len: cols,
        });
    }
    Ok((THRESHOLD_FACTOR * column_l1(w, j) / rows as f64) as f32)
}

/// Channel-wise ternarization.
pub fn ternarize(w: &Tensor) -> Result<TernaryTensor> {
    ternarize_with(w, Granularity::ChannelWise)
}

pub fn ternarize_with(w: &Tensor, granularity: Granularity) -> Result<TernaryTensor> {
    let (rows, cols) = check_weights(w, "ternarize")?;
    let (alpha64, delta64) = scales(w, rows, cols, granularity);
    let data = w.data();
    let mut codes = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for k in 0..rows {
            codes.push(ternary_code(data[k * cols + j] as f64, delta64[j]));
        }
    }
    Ok(TernaryTensor {
        rows,
        cols,
        packed: pack::pack(&codes),
        alpha: alpha64.iter().map(|&a| a as f32).collect(),
        thresholds: delta64.iter().map(|&d| d as f32).collect(),
    })
}

/// Per-channel `(α, Δ)` in `f64`.
pub(crate) fn scales(w: &Tensor, rows: usize, cols: usize, granularity: Granularity) -> (Vec<f64>, Vec<f64>) {
    match granularity {
        Granularity::ChannelWise => {
            let alpha: Vec<f64> = (0..cols).map(|j| column_l1(w, j) / rows as f64).collect();
            let delta = (0..cols)
                .map(|j| THRESHOLD_FACTOR * column_l1(w, j) / rows as f64)
                .collect();
            (alpha, delta)
        }
        Granularity::LayerWise => {
            let n = (rows * cols) as f64;
            let l1: f64 = w.data().iter().map(|&v| (v as f64).abs()).sum();
            (vec![l1 / n; cols], vec![THRESHOLD_FACTOR * l1 / n; cols])
        }
    }
}

impl TernaryTensor {
    /// Builds from row-major codes. `alpha` must have one entry per column.
    pub fn from_codes(rows: usize, cols: usize, codes: &[i8], alpha: Vec<f32>) -> Result<Self> {
        if codes.len() != rows * cols || alpha.len() != cols {
            return Err(Error::Dimension {
                op: "TernaryTensor::from_codes",
                lhs: vec![rows, cols],
                rhs: vec![codes.len(), alpha.len()],
            });
        }
        if let Some(bad) = codes.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(Error::Value {
                op: "TernaryTensor::from_codes",
                detail: format!("code {bad} is not ternary"),
            });
        }
        let mut colmajor = Vec::with_capacity(codes.len());
        for j in 0..cols {
            for k in 0..rows {
                colmajor.push(codes[k * cols + j]);
            }
        }
        Ok(Self {
            rows,
            cols,
            packed: pack::pack(&colmajor),
            thresholds: alpha.iter().map(|a| (THRESHOLD_FACTOR * *a as f64) as f32).collect(),
            alpha,
        })
    }

    /// Wraps an already packed column-major stream, as read from disk.
    pub fn from_packed(rows: usize, cols: usize, packed: Vec<u8>, alpha: Vec<f32>) -> Result<Self> {
        if packed.len() != pack::packed_len(rows * cols) || alpha.len() != cols {
            return Err(Error::Format(format!(
                "packed ternary {rows}x{cols} needs {} code bytes and {cols} scales, got {} and {}",
                pack::packed_len(rows * cols),
                packed.len(),
                alpha.len()
            )));
        }
        let thresholds = alpha.iter().map(|a| (THRESHOLD_FACTOR * *a as f64) as f32).collect();
        Ok(Self {
            rows,
            cols,
            packed,
            alpha,
            thresholds,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    /// Per-channel threshold Δ used when the tensor was produced.
    ///
    /// For tensors loaded from packed bytes the source weights are gone;
    /// this then reports `0.7·α`, which equals Δ by construction.
    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Packed codes plus one `f32` scale per channel.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * self.cols
    }

    pub fn code(&self, row: usize, col: usize) -> Result<i8> {
        pack::code_at(&self.packed, col * self.rows + row)
    }

    /// Codes of one channel in row order.
    pub fn channel_codes(&self, col: usize) -> Result<Vec<i8>> {
        let start = col * self.rows;
        (start..start + self.rows)
            .map(|i| pack::code_at(&self.packed, i))
            .collect()
    }

    /// Row-major codes.
    pub fn codes(&self) -> Result<Vec<i8>> {
        let colmajor = pack::unpack(&self.packed, self.rows * self.cols)?;
        let mut out = vec![0i8; colmajor.len()];
        for j in 0..self.cols {
            for k in 0..self.rows {
                out[k * self.cols + j] = colmajor[j * self.rows + k];
            }
        }
        Ok(out)
    }

    /// `Σ_k code[k, j]` per channel.
    pub fn channel_code_sums(&self) -> Result<Vec<i32>> {
        (0..self.cols)
            .map(|j| Ok(self.channel_codes(j)?.iter().map(|&c| c as i32).sum()))
            .collect()
    }

    /// `α_j · code[k, j]`.
    pub fn dequantize(&self) -> Result<Tensor> {
        let codes = self.codes()?;
        let data = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.alpha[i % self.cols] * c as f32)
            .collect();
        Tensor::new(vec![self.rows, self.cols], data)
    }
}

/// Free-function form of [`TernaryTensor::dequantize`].
pub fn dequantize_ternary(t: &TernaryTensor) -> Result<Tensor> {
    t.dequantize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn threshold_examples() {
        assert!((channel_threshold(&col(&[1.0, 1.0, 1.0]), 0).unwrap() - 0.7).abs() < 1e-7);
        assert_eq!(channel_threshold(&col(&[0.0, 0.0]), 0).unwrap(), 0.0);
        let d = channel_threshold(&col(&[-1.0, 0.1, 2.0]), 0).unwrap();
        assert!((d - 0.7 * 3.1 / 3.0).abs() < 1e-6);
        assert!(matches!(channel_threshold(&col(&[1.0]), 1), Err(Error::Index { .. })));
    }

    #[test]
    fn ternarize_hand_example() {
        let t = ternarize(&col(&[-1.0, 0.1, 2.0])).unwrap();
        assert_eq!(t.codes().unwrap(), vec![-1, 0, 1]);
        assert!((t.alpha()[0] - 3.1 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_gives_zero_codes() {
        let t = ternarize(&Tensor::zeros(&[4, 3])).unwrap();
        assert!(t.codes().unwrap().iter().all(|&c| c == 0));
        assert!(t.alpha().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn boundaries_follow_half_open_bins() {
        // |column| sums to 10 over 7 rows, so Δ = 0.7·10/7 = 1 exactly.
        let w = col(&[1.0, 1.0, 1.0, 1.0, 1.0, 4.0, -1.0]);
        assert_eq!(channel_threshold(&w, 0).unwrap(), 1.0);
        let codes = ternarize(&w).unwrap().codes().unwrap();
        assert_eq!(codes, vec![1, 1, 1, 1, 1, 1, 0]);
        assert_eq!(ternary_code(0.5, 0.5), 1);
        assert_eq!(ternary_code(-0.5, 0.5), 0);
        assert_eq!(ternary_code(-0.500001, 0.5), -1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ternarize(&Tensor::zeros(&[2, 2, 2])),
            Err(Error::Shape { .. })
        ));
        let nan = Tensor::new(vec![1, 1], vec![f32::NAN]).unwrap();
        assert!(matches!(ternarize(&nan), Err(Error::Value { .. })));
    }

    #[test]
    fn dequantize_examples() {
        let t = TernaryTensor::from_codes(3, 1, &[-1, 0, 1], vec![2.0]).unwrap();
        assert_eq!(t.dequantize().unwrap().data(), &[-2.0, 0.0, 2.0]);
        let z = TernaryTensor::from_codes(2, 2, &[0, 0, 0, 0], vec![5.0, 3.0]).unwrap();
        assert!(z.dequantize().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupt_code_is_format_error() {
        let t = TernaryTensor::from_packed(2, 1, vec![0b11_00], vec![1.0]).unwrap();
        assert!(matches!(t.dequantize(), Err(Error::Format(_))));
    }

    #[test]
    fn layer_wise_uses_single_scale() {
        let w = Tensor::from_rows(&[&[1.0, 0.1], &[-3.0, 0.2]]).unwrap();
        let t = ternarize_with(&w, Granularity::LayerWise).unwrap();
        assert_eq!(t.alpha()[0], t.alpha()[1]);
        assert!((t.alpha()[0] - 1.075).abs() < 1e-6);
        // global Δ = 0.7525 zeroes out the whole small column
        assert_eq!(t.codes().unwrap(), vec![1, 0, -1, 0]);
    }

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..9, 1usize..9).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-3.0f32..3.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn storage_size_is_exact(w in matrix()) {
            let t = ternarize(&w).unwrap();
            let (r, c) = (w.shape()[0], w.shape()[1]);
            prop_assert_eq!(t.packed().len(), (r * c).div_ceil(4));
            prop_assert_eq!(t.storage_bytes(), (r * c).div_ceil(4) + 4 * c);
        }

        #[test]
        fn column_scaling_keeps_codes(w in matrix(), c in 0.1f32..10.0) {
            let t = ternarize(&w).unwrap();
            let mut scaled = w.clone();
            let cols = w.shape()[1];
            for (i, v) in scaled.data_mut().iter_mut().enumerate() {
                if i % cols == 0 {
                    *v *= c;
                }
            }
            let s = ternarize(&scaled).unwrap();
            let (a, b) = (t.codes().unwrap(), s.codes().unwrap());
            // float rounding can only move values sitting within ulps of Δ
            let mismatches = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            prop_assert!(mismatches == 0, "codes changed under scaling");
            prop_assert!((s.alpha()[0] - c * t.alpha()[0]).abs() <= 1e-5 * (1.0 + s.alpha()[0]));
        }

        #[test]
        fn ternarize_dequantize_ternarize_keeps_codes(w in matrix()) {
            let t = ternarize(&w).unwrap();
            let again = ternarize(&t.dequantize().unwrap()).unwrap();
            prop_assert_eq!(t.codes().unwrap(), again.codes().unwrap());
            let rows = w.shape()[0];
            for j in 0..w.shape()[1] {
                let nnz = t.channel_codes(j).unwrap().iter().filter(|&&c| c != 0).count();
                let expect = t.alpha()[j] as f64 * nnz as f64 / rows as f64;
                prop_assert!((again.alpha()[j] as f64 - expect).abs() < 1e-6);
            }
        }

        #[test]
        fn dequantized_has_few_distinct_values(w in matrix()) {
            let d = ternarize(&w).unwrap().dequantize().unwrap();
            let mut vals: Vec<u32> = d.data().iter().map(|v| v.to_bits()).collect();
            vals.sort_unstable();
            vals.dedup();
            prop_assert!(vals.len() <= 2 * w.shape()[1] + 1);
        }
    }
}
