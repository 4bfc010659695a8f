//! Ternary vision transformer quantization engine.
//!
//! Channel-wise weight ternarization, min-max 8-bit activations, progressive
//! (8-bit then ternary) quantization-aware training, analysis instruments
//! (CAM/SDAM, Hessian top eigenvalue, loss-landscape slices) and bit-packed
//! ternary GEMM kernels for small DeiT-style vision transformers.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod quantization;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ViTConfig, VisionTransformer};
pub use quantization::{PolicySpec, QuantizationPolicy};
pub use tensor::Tensor;
