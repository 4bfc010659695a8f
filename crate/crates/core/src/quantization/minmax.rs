//! Min-max (asymmetric) 8-bit quantization.
//!
//! `s = (x_max − x_min) / 255`, `code = round((x − x_min) / s)` clamped to
//! `[0, 255]`, `x̂ = code·s + x_min`. Rounding is half away from zero. A
//! constant input has `s = 0`, all codes zero and reconstructs exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEVELS: f64 = 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivation {
    shape: Vec<usize>,
    data: Vec<u8>,
    scale: f32,
    offset: f32,
}

/// Affine parameters of one quantized range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMaxParams {
    pub scale: f32,
    pub offset: f32,
}

impl MinMaxParams {
    pub fn from_range(min: f32, max: f32) -> Self {
        let scale = if max > min {
            ((max as f64 - min as f64) / LEVELS) as f32
        } else {
            0.0
        };
        Self { scale, offset: min }
    }

    pub fn from_values(values: impl IntoIterator<Item = f32>) -> Self {
        let (min, max) = values
            .into_iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if min > max {
            // empty input
            return Self {
                scale: 0.0,
                offset: 0.0,
            };
        }
        Self::from_range(min, max)
    }

    #[inline]
    pub fn code(&self, x: f64) -> u8 {
        if self.scale == 0.0 {
            return 0;
        }
        ((x - self.offset as f64) / self.scale as f64)
            .round()
            .clamp(0.0, LEVELS) as u8
    }

    #[inline]
    pub fn dequant(&self, code: u8) -> f64 {
        code as f64 * self.scale as f64 + self.offset as f64
    }

    /// Quantize-dequantize in one step.
    #[inline]
    pub fn fake(&self, x: f64) -> f64 {
        self.dequant(self.code(x))
    }

    /// Whether `x` lies inside the representable range (no clamping).
    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        let lo = self.offset as f64;
        x >= lo && x <= lo + LEVELS * self.scale as f64
    }
}

pub fn quantize_minmax8(f: &Tensor) -> Result<QuantizedActivation> {
    if !f.is_finite() {
        return Err(Error::Value {
            op: "quantize_minmax8",
            detail: "input contains non-finite values".into(),
        });
    }
    let params = MinMaxParams::from_values(f.data().iter().copied());
    Ok(quantize_with(f, params))
}

/// Quantizes with a fixed (calibrated) range; out-of-range values clamp.
pub fn quantize_with(f: &Tensor, params: MinMaxParams) -> QuantizedActivation {
    QuantizedActivation {
        shape: f.shape().to_vec(),
        data: f.data().iter().map(|&x| params.code(x as f64)).collect(),
        scale: params.scale,
        offset: params.offset,
    }
}

impl QuantizedActivation {
    pub fn from_parts(shape: Vec<usize>, data: Vec<u8>, scale: f32, offset: f32) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "QuantizedActivation",
                detail: format!("shape {shape:?} vs {} codes", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            scale,
            offset,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// `x_min`.
    pub fn offset(&self) -> f32 {
        self.offset
    }

    pub fn x_max(&self) -> f32 {
        (self.offset as f64 + LEVELS * self.scale as f64) as f32
    }

    pub fn params(&self) -> MinMaxParams {
        MinMaxParams {
            scale: self.scale,
            offset: self.offset,
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let p = self.params();
        let data: Vec<f64> = self.data.iter().map(|&c| p.dequant(c)).collect();
        Tensor::from_f64(self.shape.clone(), &data)
    }
}

/// Weights quantized to 8 bits with one min-max range per output column.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuantized8 {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    params: Vec<MinMaxParams>,
}

pub fn quantize_minmax8_columns(w: &Tensor) -> Result<ChannelQuantized8> {
    let (rows, cols) = w.dims2("quantize_minmax8_columns")?;
    if !w.is_finite() {
        return Err(Error::Value {
            op: "quantize_minmax8_columns",
            detail: "weights contain non-finite values".into(),
        });
    }
    let params: Vec<MinMaxParams> = (0..cols)
        .map(|j| MinMaxParams::from_values((0..rows).map(|k| w.at2(k, j))))
        .collect();
    let codes = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| params[i % cols].code(x as f64))
        .collect();
    Ok(ChannelQuantized8 {
        rows,
        cols,
        codes,
        params,
    })
}

impl ChannelQuantized8 {
    pub fn from_parts(rows: usize, cols: usize, codes: Vec<u8>, scales: &[f32], offsets: &[f32]) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != cols || offsets.len() != cols {
            return Err(Error::Format(format!(
                "8-bit weight {rows}x{cols}: {} codes, {} scales, {} offsets",
                codes.len(),
                scales.len(),
                offsets.len()
            )));
        }
        let params = scales
            .iter()
            .zip(offsets)
            .map(|(&scale, &offset)| MinMaxParams { scale, offset })
            .collect();
        Ok(Self {
            rows,
            cols,
            codes,
            params,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    /// Row-major codes.
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> Vec<f32> {
        self.params.iter().map(|p| p.scale).collect()
    }

    pub fn offsets(&self) -> Vec<f32> {
        self.params.iter().map(|p| p.offset).collect()
    }

    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 8 * self.cols
    }

    pub fn dequantize(&self) -> Tensor {
        let data: Vec<f64> = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.params[i % self.cols].dequant(c))
            .collect();
        Tensor::from_f64(vec![self.rows, self.cols], &data)
    }
}
