//! Model-size arithmetic.

use super::config::ViTConfig;
use crate::error::Result;
use crate::quantization::pack::packed_len;
use crate::quantization::policy::{PolicySpec, QuantizationPolicy, WeightBits};

/// Sizes in bytes.
///
/// `nominal_bytes` bills every parameter at the bit width of the group it
/// belongs to (patch embedding, head, body) and ignores scale metadata; this
/// is the convention used for published compression ratios. `storage_bytes`
/// is the exact in-memory footprint: packed codes plus `f32` alphas for
/// ternary matrices, `u8` codes plus per-column scale and offset for 8-bit
/// matrices, `f32` for everything else.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeReport {
    pub parameters: usize,
    pub real_bytes: f64,
    pub nominal_bytes: f64,
    pub storage_bytes: f64,
    /// `real_bytes / nominal_bytes`.
    pub compression_ratio: f64,
    /// `real_bytes / storage_bytes`.
    pub storage_ratio: f64,
}

impl SizeReport {
    pub fn real_mb(&self) -> f64 {
        self.real_bytes / 1e6
    }

    pub fn nominal_mb(&self) -> f64 {
        self.nominal_bytes / 1e6
    }

    pub fn storage_mb(&self) -> f64 {
        self.storage_bytes / 1e6
    }
}

pub fn model_size_bytes(config: &ViTConfig, spec: &PolicySpec) -> Result<SizeReport> {
    config.validate()?;
    let policy = QuantizationPolicy::resolve(spec, &config.layer_specs())?;
    let parameters = config.parameter_count();
    let body_bits = f64::from(spec.body_bits.bits());

    let mut linear_params = 0usize;
    let mut nominal_bits = 0.0;
    let mut storage = 0usize;
    for (id, rows, cols) in config.linear_shapes() {
        let bits = policy.weight_bits(&id)?;
        let count = rows * cols + cols;
        linear_params += count;
        nominal_bits += f64::from(bits.bits()) * count as f64;
        storage += 4 * cols
            + match bits {
                WeightBits::Real32 => 4 * rows * cols,
                WeightBits::Int8 => rows * cols + 8 * cols,
                WeightBits::Ternary => packed_len(rows * cols) + 4 * cols,
            };
    }
    // norms, class token and positional embeddings
    let rest = parameters - linear_params;
    nominal_bits += body_bits * rest as f64;
    storage += 4 * rest;

    let real_bytes = 4.0 * parameters as f64;
    let nominal_bytes = nominal_bits / 8.0;
    Ok(SizeReport {
        parameters,
        real_bytes,
        nominal_bytes,
        storage_bytes: storage as f64,
        compression_ratio: real_bytes / nominal_bytes,
        storage_ratio: real_bytes / storage as f64,
    })
}
