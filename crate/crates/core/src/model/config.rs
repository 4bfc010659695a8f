use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantization::policy::{LayerKind, LayerSpec, PolicySpec, QuantizationPolicy, HEAD, PATCH_EMBED};

/// Architecture hyperparameters of a DeiT-style vision transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Scale attention logits by `1/√(d/N_h)` instead of the default `1/√d`.
    #[serde(default)]
    pub attn_scale_per_head: bool,
}

fn default_channels() -> usize {
    3
}

impl ViTConfig {
    fn deit(embed_dim: usize, num_heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim,
            depth: 12,
            num_heads,
            mlp_ratio: 4.0,
            num_classes: 1000,
            attn_scale_per_head: false,
        }
    }

    pub fn deit_tiny() -> Self {
        Self::deit(192, 3)
    }

    pub fn deit_small() -> Self {
        Self::deit(384, 6)
    }

    pub fn deit_base() -> Self {
        Self::deit(768, 12)
    }

    /// Small configuration used by the desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 4.0,
            num_classes: 10,
            attn_scale_per_head: false,
        }
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.patch_size", self.patch_size),
            ("model.in_channels", self.in_channels),
            ("model.embed_dim", self.embed_dim),
            ("model.depth", self.depth),
            ("model.num_heads", self.num_heads),
            ("model.num_classes", self.num_classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be a positive integer"));
            }
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::config("model.mlp_ratio", "must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.num_heads",
                format!(
                    "embed_dim {} is not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "model.patch_size",
                format!(
                    "image_size {} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        let hidden = self.mlp_ratio * self.embed_dim as f64;
        if (hidden - hidden.round()).abs() > 1e-9 {
            return Err(Error::config(
                "model.mlp_ratio",
                format!("mlp_ratio * embed_dim = {hidden} is not an integer"),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count `n`, class token included.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn attention_scale(&self) -> f64 {
        let denom = if self.attn_scale_per_head {
            self.head_dim()
        } else {
            self.embed_dim
        };
        1.0 / (denom as f64).sqrt()
    }

    /// Layers addressable by a quantization policy, in forward order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let lin = |id: String| LayerSpec {
            id,
            kind: LayerKind::Linear,
        };
        let norm = |id: String| LayerSpec {
            id,
            kind: LayerKind::Norm,
        };
        let mut out = vec![lin(PATCH_EMBED.into())];
        for i in 0..self.depth {
            out.push(norm(format!("blocks.{i}.norm1")));
            for role in ["q", "k", "v", "proj"] {
                out.push(lin(format!("blocks.{i}.attn.{role}")));
            }
            out.push(norm(format!("blocks.{i}.norm2")));
            out.push(lin(format!("blocks.{i}.mlp.fc1")));
            out.push(lin(format!("blocks.{i}.mlp.fc2")));
        }
        out.push(norm("norm".into()));
        out.push(lin(HEAD.into()));
        out
    }

    /// Resolves a policy spec against this architecture's layers.
    pub fn policy(&self, spec: &PolicySpec) -> Result<QuantizationPolicy> {
        QuantizationPolicy::resolve(spec, &self.layer_specs())
    }

    /// Shapes `(rows, cols)` of every linear layer's weight, by layer id.
    pub fn linear_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, h) = (self.embed_dim, self.hidden_dim());
        let mut out = vec![(PATCH_EMBED.to_string(), self.patch_dim(), d)];
        for i in 0..self.depth {
            for role in ["q", "k", "v", "proj"] {
                out.push((format!("blocks.{i}.attn.{role}"), d, d));
            }
            out.push((format!("blocks.{i}.mlp.fc1"), d, h));
            out.push((format!("blocks.{i}.mlp.fc2"), h, d));
        }
        out.push((HEAD.to_string(), d, self.num_classes));
        out
    }

    /// Total trainable parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let linear: usize = self.linear_shapes().iter().map(|(_, r, c)| r * c + c).sum();
        let norms = (2 * self.depth + 1) * 2 * d;
        linear + norms + d + self.num_tokens() * d
    }
}
