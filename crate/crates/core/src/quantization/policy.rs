//! Per-layer bit-width assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ternary::Granularity;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum WeightBits {
    Real32,
    Int8,
    Ternary,
}

impl WeightBits {
    pub fn bits(self) -> u32 {
        match self {
            WeightBits::Real32 => 32,
            WeightBits::Int8 => 8,
            WeightBits::Ternary => 2,
        }
    }
}

impl TryFrom<u32> for WeightBits {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(WeightBits::Real32),
            8 => Ok(WeightBits::Int8),
            2 => Ok(WeightBits::Ternary),
            other => Err(format!("weight bit-width must be 32, 8 or 2, got {other}")),
        }
    }
}

impl From<WeightBits> for u32 {
    fn from(b: WeightBits) -> u32 {
        b.bits()
    }
}

impl fmt::Display for WeightBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ActivationBits {
    Real32,
    Int8,
}

impl TryFrom<u32> for ActivationBits {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(ActivationBits::Real32),
            8 => Ok(ActivationBits::Int8),
            other => Err(format!("activation bit-width must be 32 or 8, got {other}")),
        }
    }
}

impl From<ActivationBits> for u32 {
    fn from(b: ActivationBits) -> u32 {
        match b {
            ActivationBits::Real32 => 32,
            ActivationBits::Int8 => 8,
        }
    }
}

/// Where activation ranges come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    /// min/max of each tensor, recomputed every forward.
    #[default]
    Dynamic,
    /// Ranges recorded once by a calibration pass and reused.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Norm,
}

/// A named layer as seen by the policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
}

pub const PATCH_EMBED: &str = "patch_embed";
pub const HEAD: &str = "head";

/// The serializable form of a policy (`[quantization]` in run configs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default = "default_body")]
    pub body_bits: WeightBits,
    #[serde(default = "default_edge")]
    pub patch_embed_bits: WeightBits,
    #[serde(default = "default_edge")]
    pub head_bits: WeightBits,
    #[serde(default = "default_act")]
    pub activation_bits: ActivationBits,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub calibration: Calibration,
    /// Per-layer overrides keyed by layer id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<String, WeightBits>,
}

fn default_body() -> WeightBits {
    WeightBits::Ternary
}

fn default_edge() -> WeightBits {
    WeightBits::Int8
}

fn default_act() -> ActivationBits {
    ActivationBits::Int8
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self::ternary()
    }
}

impl PolicySpec {
    pub fn uniform(weights: WeightBits, activations: ActivationBits) -> Self {
        Self {
            body_bits: weights,
            patch_embed_bits: weights,
            head_bits: weights,
            activation_bits: activations,
            granularity: Granularity::ChannelWise,
            calibration: Calibration::Dynamic,
            layers: BTreeMap::new(),
        }
    }

    pub fn real32() -> Self {
        Self::uniform(WeightBits::Real32, ActivationBits::Real32)
    }

    pub fn int8() -> Self {
        Self::uniform(WeightBits::Int8, ActivationBits::Int8)
    }

    /// Ternary body with 8-bit patch embedding and head.
    pub fn ternary() -> Self {
        Self {
            body_bits: WeightBits::Ternary,
            ..Self::int8()
        }
    }

    /// Named presets: `real32`, `int8`, `ternary`, `ternary-layerwise`,
    /// `ternary-all`.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "real32" => Self::real32(),
            "int8" => Self::int8(),
            "ternary" => Self::ternary(),
            "ternary-layerwise" => Self {
                granularity: Granularity::LayerWise,
                ..Self::ternary()
            },
            "ternary-all" => Self::uniform(WeightBits::Ternary, ActivationBits::Int8),
            _ => return None,
        })
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }
}

/// Resolved per-layer policy.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationPolicy {
    weights: BTreeMap<String, WeightBits>,
    norms: BTreeSet<String>,
    pub activations: ActivationBits,
    pub granularity: Granularity,
    pub calibration: Calibration,
}

impl QuantizationPolicy {
    pub fn resolve(spec: &PolicySpec, layers: &[LayerSpec]) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for layer in layers {
            let bits = match (layer.kind, layer.id.as_str()) {
                (LayerKind::Norm, _) => WeightBits::Real32,
                (LayerKind::Linear, PATCH_EMBED) => spec.patch_embed_bits,
                (LayerKind::Linear, HEAD) => spec.head_bits,
                (LayerKind::Linear, _) => spec.body_bits,
            };
            weights.insert(layer.id.clone(), bits);
        }
        let mut policy = Self {
            weights,
            norms: layers
                .iter()
                .filter(|l| l.kind == LayerKind::Norm)
                .map(|l| l.id.clone())
                .collect(),
            activations: spec.activation_bits,
            granularity: spec.granularity,
            calibration: spec.calibration,
        };
        for (id, &bits) in &spec.layers {
            policy.set_weight_bits(id, bits)?;
        }
        Ok(policy)
    }

    pub fn weight_bits(&self, layer: &str) -> Result<WeightBits> {
        self.weights
            .get(layer)
            .copied()
            .ok_or_else(|| Error::config(format!("quantization.layers.{layer}"), "unknown layer id"))
    }

    /// Overrides one layer. Normalization layers only accept 32 bits.
    pub fn set_weight_bits(&mut self, layer: &str, bits: WeightBits) -> Result<()> {
        let key = format!("quantization.layers.{layer}");
        if !self.weights.contains_key(layer) {
            return Err(Error::config(key, "unknown layer id"));
        }
        if self.norms.contains(layer) && bits != WeightBits::Real32 {
            return Err(Error::config(key, "normalization layers are never quantized"));
        }
        self.weights.insert(layer.to_string(), bits);
        Ok(())
    }

    /// The same policy with every ternary layer held at 8 bits instead.
    pub fn ternary_as_int8(&self) -> Self {
        let mut out = self.clone();
        for bits in out.weights.values_mut() {
            if *bits == WeightBits::Ternary {
                *bits = WeightBits::Int8;
            }
        }
        out
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, WeightBits)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn quantizes_activations(&self) -> bool {
        self.activations == ActivationBits::Int8
    }
}
