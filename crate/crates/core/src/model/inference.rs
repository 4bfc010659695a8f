//! Inference path that runs the quantized weights through the packed kernels.

use std::collections::BTreeMap;

use super::config::ViTConfig;
use super::vit::{patchify, ActivationRanges, LayerNormParams, Linear, VisionTransformer};
use crate::error::{Error, Result};
use crate::kernels::{int8_gemm_f32, int8_gemm_i8, ternary_gemm_f32, ternary_gemm_i8};
use crate::ops;
use crate::quantization::minmax::{quantize_with, ChannelQuantized8, MinMaxParams, QuantizedActivation};
use crate::quantization::policy::{Calibration, QuantizationPolicy, WeightBits, HEAD, PATCH_EMBED};
use crate::quantization::ternary::TernaryTensor;
use crate::quantization::{quantize_minmax8, quantize_minmax8_columns, ternarize_with};
use crate::tensor::Tensor;

/// Stored form of one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightKernel {
    Real32(Tensor),
    Int8(ChannelQuantized8),
    Ternary(TernaryTensor),
}

impl WeightKernel {
    pub fn storage_bytes(&self) -> usize {
        match self {
            WeightKernel::Real32(t) => 4 * t.len(),
            WeightKernel::Int8(q) => q.storage_bytes(),
            WeightKernel::Ternary(t) => t.storage_bytes(),
        }
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        match self {
            WeightKernel::Real32(t) => Ok(t.clone()),
            WeightKernel::Int8(q) => Ok(q.dequantize()),
            WeightKernel::Ternary(t) => t.dequantize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CompiledLinear {
    weight: WeightKernel,
    bias: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
struct CompiledBlock {
    norm1: LayerNormParams,
    q: CompiledLinear,
    k: CompiledLinear,
    v: CompiledLinear,
    proj: CompiledLinear,
    norm2: LayerNormParams,
    fc1: CompiledLinear,
    fc2: CompiledLinear,
}

/// A transformer whose linear layers hold packed ternary or 8-bit weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    config: ViTConfig,
    quantize_acts: bool,
    frozen: Option<ActivationRanges>,
    patch_embed: CompiledLinear,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<CompiledBlock>,
    norm: LayerNormParams,
    head: CompiledLinear,
}

impl InferenceModel {
    /// Quantizes every linear layer of `model` according to `policy`.
    pub fn compile(model: &VisionTransformer, policy: &QuantizationPolicy) -> Result<Self> {
        let lin = |id: &str, l: &Linear| -> Result<CompiledLinear> {
            let weight = match policy.weight_bits(id)? {
                WeightBits::Real32 => WeightKernel::Real32(l.weight.clone().with_requires_grad(false)),
                WeightBits::Int8 => WeightKernel::Int8(quantize_minmax8_columns(&l.weight)?),
                WeightBits::Ternary => WeightKernel::Ternary(ternarize_with(&l.weight, policy.granularity)?),
            };
            Ok(CompiledLinear {
                weight,
                bias: l.bias.as_ref().map(|b| b.data().to_vec()),
            })
        };
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let id = |r: &str| format!("blocks.{i}.{r}");
                Ok(CompiledBlock {
                    norm1: b.norm1.clone(),
                    q: lin(&id("attn.q"), &b.q)?,
                    k: lin(&id("attn.k"), &b.k)?,
                    v: lin(&id("attn.v"), &b.v)?,
                    proj: lin(&id("attn.proj"), &b.proj)?,
                    norm2: b.norm2.clone(),
                    fc1: lin(&id("mlp.fc1"), &b.fc1)?,
                    fc2: lin(&id("mlp.fc2"), &b.fc2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: model.config.clone(),
            quantize_acts: policy.quantizes_activations(),
            frozen: (policy.calibration == Calibration::Frozen).then(|| model.act_ranges.clone()),
            patch_embed: lin(PATCH_EMBED, &model.patch_embed)?,
            cls_token: model.cls_token.clone(),
            pos_embed: model.pos_embed.clone(),
            blocks,
            norm: model.norm.clone(),
            head: lin(HEAD, &model.head)?,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Stored weights by layer id.
    pub fn weights(&self) -> BTreeMap<String, &WeightKernel> {
        let mut out = BTreeMap::new();
        out.insert(PATCH_EMBED.to_string(), &self.patch_embed.weight);
        for (i, b) in self.blocks.iter().enumerate() {
            for (role, l) in [
                ("attn.q", &b.q),
                ("attn.k", &b.k),
                ("attn.v", &b.v),
                ("attn.proj", &b.proj),
                ("mlp.fc1", &b.fc1),
                ("mlp.fc2", &b.fc2),
            ] {
                out.insert(format!("blocks.{i}.{role}"), &l.weight);
            }
        }
        out.insert(HEAD.to_string(), &self.head.weight);
        out
    }

    /// Bytes held by all linear weights (biases excluded).
    pub fn weight_bytes(&self) -> usize {
        self.weights().values().map(|w| w.storage_bytes()).sum()
    }

    fn act(&self, x: &Tensor, site: &str) -> Result<Option<QuantizedActivation>> {
        if !self.quantize_acts {
            return Ok(None);
        }
        match &self.frozen {
            None => quantize_minmax8(x).map(Some),
            Some(ranges) => {
                let &(lo, hi) = ranges
                    .get(site)
                    .ok_or_else(|| Error::Contract(format!("activation site `{site}` has no calibrated range")))?;
                Ok(Some(quantize_with(x, MinMaxParams::from_range(lo, hi))))
            }
        }
    }

    fn fake_act(&self, x: Tensor, site: &str) -> Result<Tensor> {
        Ok(match self.act(&x, site)? {
            Some(q) => q.dequantize(),
            None => x,
        })
    }

    fn apply(&self, l: &CompiledLinear, x: &Tensor, xq: Option<&QuantizedActivation>) -> Result<Tensor> {
        let mut y = match (xq, &l.weight) {
            (Some(q), WeightKernel::Ternary(w)) => ternary_gemm_i8(q, w)?,
            (Some(q), WeightKernel::Int8(w)) => int8_gemm_i8(q, w)?,
            (Some(q), WeightKernel::Real32(w)) => ops::matmul(&q.dequantize(), w)?,
            (None, WeightKernel::Ternary(w)) => ternary_gemm_f32(x, w)?,
            (None, WeightKernel::Int8(w)) => int8_gemm_f32(x, w)?,
            (None, WeightKernel::Real32(w)) => ops::matmul(x, w)?,
        };
        if let Some(b) = &l.bias {
            let n = b.len();
            for row in y.data_mut().chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    fn linear(&self, l: &CompiledLinear, x: &Tensor, site: &str) -> Result<Tensor> {
        let xq = self.act(x, site)?;
        self.apply(l, x, xq.as_ref())
    }

    /// Applies the linear layer `id` (input quantization included) to `x`.
    pub fn apply_linear(&self, id: &str, x: &Tensor) -> Result<Tensor> {
        let l = self
            .compiled(id)
            .ok_or_else(|| Error::config(format!("quantization.layers.{id}"), "unknown layer id"))?;
        self.linear(l, x, &format!("{id}.input"))
    }

    fn compiled(&self, id: &str) -> Option<&CompiledLinear> {
        match id {
            PATCH_EMBED => Some(&self.patch_embed),
            HEAD => Some(&self.head),
            _ => {
                let (idx, role) = id.strip_prefix("blocks.")?.split_once('.')?;
                let b = self.blocks.get(idx.parse::<usize>().ok()?)?;
                Some(match role {
                    "attn.q" => &b.q,
                    "attn.k" => &b.k,
                    "attn.v" => &b.v,
                    "attn.proj" => &b.proj,
                    "mlp.fc1" => &b.fc1,
                    "mlp.fc2" => &b.fc2,
                    _ => return None,
                })
            }
        }
    }

    /// Logits `[B × num_classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let patches = patchify(images, cfg)?;
        let batch = images.shape()[0];
        let (n, d) = (cfg.num_tokens(), cfg.embed_dim);
        let emb = self.linear(&self.patch_embed, &patches, "patch_embed.input")?;

        let mut tokens = vec![0.0f32; batch * n * d];
        let (cls, pos, e) = (self.cls_token.data(), self.pos_embed.data(), emb.data());
        for s in 0..batch {
            for t in 0..n {
                let dst = &mut tokens[(s * n + t) * d..(s * n + t + 1) * d];
                let src = if t == 0 {
                    cls
                } else {
                    &e[(s * (n - 1) + t - 1) * d..(s * (n - 1) + t) * d]
                };
                for c in 0..d {
                    dst[c] = src[c] + pos[t * d + c];
                }
            }
        }
        let mut x = Tensor::new(vec![batch * n, d], tokens)?;

        for (i, b) in self.blocks.iter().enumerate() {
            let h = ops::layernorm(&x, &b.norm1.gamma, &b.norm1.beta)?;
            let a = self.attention(i, b, &h, batch)?;
            add_in_place(&mut x, &a);
            let h = ops::layernorm(&x, &b.norm2.gamma, &b.norm2.beta)?;
            let hidden = self.linear(&b.fc1, &h, &format!("blocks.{i}.mlp.fc1.input"))?;
            let m = self.linear(&b.fc2, &ops::gelu(&hidden), &format!("blocks.{i}.mlp.fc2.input"))?;
            add_in_place(&mut x, &m);
        }

        let x = ops::layernorm(&x, &self.norm.gamma, &self.norm.beta)?;
        let mut cls_rows = Vec::with_capacity(batch * d);
        for s in 0..batch {
            cls_rows.extend_from_slice(&x.data()[s * n * d..(s * n + 1) * d]);
        }
        let cls_rows = Tensor::new(vec![batch, d], cls_rows)?;
        self.linear(&self.head, &cls_rows, "head.input")
    }

    fn attention(&self, i: usize, b: &CompiledBlock, h: &Tensor, batch: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let site = |s: &str| format!("blocks.{i}.attn.{s}");
        let hq = self.act(h, &site("input"))?;
        let fq = self.fake_act(self.apply(&b.q, h, hq.as_ref())?, &site("q_act"))?;
        let fk = self.fake_act(self.apply(&b.k, h, hq.as_ref())?, &site("k_act"))?;
        let fv = self.fake_act(self.apply(&b.v, h, hq.as_ref())?, &site("v_act"))?;

        let (n, d, hd) = (cfg.num_tokens(), cfg.embed_dim, cfg.head_dim());
        let scale = cfg.attention_scale();
        let mut merged = vec![0.0f32; batch * n * d];
        for s in 0..batch {
            for head in 0..cfg.num_heads {
                let qs = block_of(&fq, s * n, n, head * hd, hd)?;
                let ks = block_of(&fk, s * n, n, head * hd, hd)?;
                let vs = block_of(&fv, s * n, n, head * hd, hd)?;
                let scores = ops::matmul(&qs, &ks.transpose2()?)?;
                let scores = Tensor::new(
                    vec![n, n],
                    scores.data().iter().map(|&v| (v as f64 * scale) as f32).collect(),
                )?;
                let a = ops::softmax_lastdim(&scores)?;
                let a = self.fake_act(a, &site("probs"))?;
                let out = ops::matmul(&a, &vs)?;
                for r in 0..n {
                    let dst = (s * n + r) * d + head * hd;
                    merged[dst..dst + hd].copy_from_slice(&out.data()[r * hd..(r + 1) * hd]);
                }
            }
        }
        let merged = Tensor::new(vec![batch * n, d], merged)?;
        self.linear(&b.proj, &merged, &site("proj.input"))
    }
}

fn block_of(x: &Tensor, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Tensor> {
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(rows * cols);
    for r in row0..row0 + rows {
        out.extend_from_slice(&x.data()[r * c + col0..r * c + col0 + cols]);
    }
    Tensor::new(vec![rows, cols], out)
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}
