//! Vision transformer definition, size accounting and the compiled
//! inference path.

mod config;
mod inference;
mod size;
mod vit;

pub use config::ViTConfig;
pub use inference::{InferenceModel, WeightKernel};
pub use size::{model_size_bytes, SizeReport};
pub use vit::{
    argmax, patchify, ActivationRanges, BatchStats, Block, ForwardPass, LayerNormParams, Linear, VisionTransformer,
};
