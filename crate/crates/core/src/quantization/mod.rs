//! Weight ternarization, min-max 8-bit quantization, straight-through
//! gradients and per-layer bit-width policies.

pub mod minmax;
pub mod pack;
pub mod policy;
pub mod ste;
pub mod ternary;

pub use minmax::{
    quantize_minmax8, quantize_minmax8_columns, quantize_with, ChannelQuantized8, MinMaxParams, QuantizedActivation,
};
pub use policy::{ActivationBits, Calibration, LayerKind, LayerSpec, PolicySpec, QuantizationPolicy, WeightBits};
pub use ste::{ste_backward_round, ste_backward_ternarize, ste_backward_ternarize_with};
pub use ternary::{channel_threshold, dequantize_ternary, ternarize, ternarize_with, Granularity, TernaryTensor};
