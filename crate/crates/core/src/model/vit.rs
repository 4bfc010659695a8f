//! DeiT-style vision transformer on the autodiff tape.
//!
//! Pre-LN residual blocks, class token and learned positional embeddings.
//! Every linear layer quantizes its weights according to the policy and,
//! when activations are 8-bit, its input; inside attention the query, key,
//! value and probability matrices are quantized as well. Softmax and layer
//! normalization always run at full precision.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::ViTConfig;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::quantization::minmax::MinMaxParams;
use crate::quantization::policy::{Calibration, QuantizationPolicy, WeightBits, HEAD, PATCH_EMBED};
use crate::tensor::Tensor;

const INIT_STD: f32 = 0.02;

/// Recorded `(min, max)` per activation quantization site.
pub type ActivationRanges = BTreeMap<String, (f32, f32)>;

/// `y = x·W + b` with `W[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::trunc_normal(&[rows, cols], INIT_STD, rng).with_requires_grad(true),
            bias: Some(Tensor::zeros(&[cols]).with_requires_grad(true)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]).with_requires_grad(true),
            beta: Tensor::zeros(&[dim]).with_requires_grad(true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub head: Linear,
    /// Calibrated activation ranges, used when the policy freezes them.
    pub act_ranges: ActivationRanges,
}

/// Handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves by name, in binding order.
    pub bindings: Vec<(String, Var)>,
    /// Attention probability matrices, one per (block, sample, head).
    pub attention: Vec<Var>,
}

/// Summary of a loss/gradient evaluation on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// Rearranges `[B, C, H, W]` images into `[B·P, C·p·p]` patch rows.
/// Patches are taken row-major over the grid; each row is flattened in
/// `(channel, y, x)` order.
pub fn patchify(images: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("expected [B, C, H, W], got {:?}", images.shape()),
        });
    };
    if h != config.image_size || w != config.image_size || c != config.in_channels {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!(
                "images are {c}x{h}x{w}, model expects {}x{}x{}",
                config.in_channels, config.image_size, config.image_size
            ),
        });
    }
    let (p, g) = (config.patch_size, config.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + y) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * g * g, config.patch_dim()], out)
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    policy: &'a QuantizationPolicy,
    ranges: &'a ActivationRanges,
    recorder: Option<&'a mut ActivationRanges>,
    bindings: Vec<(String, Var)>,
    attention: Vec<Var>,
}

impl Ctx<'_> {
    fn bind(&mut self, name: String, t: &Tensor) -> Var {
        let v = self.tape.leaf(t);
        self.bindings.push((name, v));
        v
    }

    fn bind_linear(&mut self, id: &str, l: &Linear) -> (Var, Option<Var>) {
        let w = self.bind(format!("{id}.weight"), &l.weight);
        let b = l.bias.as_ref().map(|b| self.bind(format!("{id}.bias"), b));
        (w, b)
    }

    fn bind_norm(&mut self, id: &str, n: &LayerNormParams) -> (Var, Var) {
        (
            self.bind(format!("{id}.gamma"), &n.gamma),
            self.bind(format!("{id}.beta"), &n.beta),
        )
    }

    fn quant_act(&mut self, x: Var, site: &str) -> Result<Var> {
        if !self.policy.quantizes_activations() {
            return Ok(x);
        }
        if let Some(rec) = self.recorder.as_deref_mut() {
            let vals = self.tape.values(x);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min) as f32;
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) as f32;
            let e = rec.entry(site.to_string()).or_insert((lo, hi));
            *e = (e.0.min(lo), e.1.max(hi));
        }
        let range = match self.policy.calibration {
            Calibration::Dynamic => None,
            Calibration::Frozen => {
                let &(lo, hi) = self.ranges.get(site).ok_or_else(|| {
                    Error::Contract(format!(
                        "activation site `{site}` has no calibrated range; run calibration first"
                    ))
                })?;
                Some(MinMaxParams::from_range(lo, hi))
            }
        };
        Ok(self.tape.fake_quant8(x, range))
    }

    fn quant_weight(&mut self, id: &str, w: Var) -> Result<Var> {
        match self.policy.weight_bits(id)? {
            WeightBits::Real32 => Ok(w),
            WeightBits::Int8 => self.tape.fake_quant8_columns(w),
            WeightBits::Ternary => self.tape.fake_ternary(w, self.policy.granularity),
        }
    }

    /// Linear layer whose input is already quantized (or left real).
    fn linear_q(&mut self, xq: Var, id: &str, wb: (Var, Option<Var>)) -> Result<Var> {
        let w = self.quant_weight(id, wb.0)?;
        let y = self.tape.matmul(xq, w)?;
        match wb.1 {
            Some(b) => self.tape.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    fn linear(&mut self, x: Var, id: &str, wb: (Var, Option<Var>)) -> Result<Var> {
        let xq = self.quant_act(x, &format!("{id}.input"))?;
        self.linear_q(xq, id, wb)
    }
}

impl VisionTransformer {
    pub fn new<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.embed_dim, config.hidden_dim());
        let patch_embed = Linear::init(config.patch_dim(), d, rng);
        let cls_token = Tensor::trunc_normal(&[1, d], INIT_STD, rng).with_requires_grad(true);
        let pos_embed = Tensor::trunc_normal(&[config.num_tokens(), d], INIT_STD, rng).with_requires_grad(true);
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1: LayerNormParams::init(d),
                q: Linear::init(d, d, rng),
                k: Linear::init(d, d, rng),
                v: Linear::init(d, d, rng),
                proj: Linear::init(d, d, rng),
                norm2: LayerNormParams::init(d),
                fc1: Linear::init(d, h, rng),
                fc2: Linear::init(h, d, rng),
            })
            .collect();
        let norm = LayerNormParams::init(d);
        let head = Linear::init(d, config.num_classes, rng);
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            act_ranges: ActivationRanges::new(),
        })
    }

    /// All trainable tensors with their names, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push_linear(&mut out, PATCH_EMBED, &self.patch_embed);
        out.push(("cls_token".into(), &self.cls_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            push_norm(&mut out, &format!("blocks.{i}.norm1"), &b.norm1);
            push_linear(&mut out, &format!("blocks.{i}.attn.q"), &b.q);
            push_linear(&mut out, &format!("blocks.{i}.attn.k"), &b.k);
            push_linear(&mut out, &format!("blocks.{i}.attn.v"), &b.v);
            push_linear(&mut out, &format!("blocks.{i}.attn.proj"), &b.proj);
            push_norm(&mut out, &format!("blocks.{i}.norm2"), &b.norm2);
            push_linear(&mut out, &format!("blocks.{i}.mlp.fc1"), &b.fc1);
            push_linear(&mut out, &format!("blocks.{i}.mlp.fc2"), &b.fc2);
        }
        push_norm(&mut out, "norm", &self.norm);
        push_linear(&mut out, HEAD, &self.head);
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        push_linear_mut(&mut out, PATCH_EMBED, &mut self.patch_embed);
        out.push(("cls_token".into(), &mut self.cls_token));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_norm_mut(&mut out, &format!("blocks.{i}.norm1"), &mut b.norm1);
            push_linear_mut(&mut out, &format!("blocks.{i}.attn.q"), &mut b.q);
            push_linear_mut(&mut out, &format!("blocks.{i}.attn.k"), &mut b.k);
            push_linear_mut(&mut out, &format!("blocks.{i}.attn.v"), &mut b.v);
            push_linear_mut(&mut out, &format!("blocks.{i}.attn.proj"), &mut b.proj);
            push_norm_mut(&mut out, &format!("blocks.{i}.norm2"), &mut b.norm2);
            push_linear_mut(&mut out, &format!("blocks.{i}.mlp.fc1"), &mut b.fc1);
            push_linear_mut(&mut out, &format!("blocks.{i}.mlp.fc2"), &mut b.fc2);
        }
        push_norm_mut(&mut out, "norm", &mut self.norm);
        push_linear_mut(&mut out, HEAD, &mut self.head);
        out
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.named_parameters()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_parameters_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// The linear layer with the given policy id.
    pub fn linear(&self, id: &str) -> Option<&Linear> {
        if id == PATCH_EMBED {
            return Some(&self.patch_embed);
        }
        if id == HEAD {
            return Some(&self.head);
        }
        let rest = id.strip_prefix("blocks.")?;
        let (idx, role) = rest.split_once('.')?;
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

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_parameters_mut() {
            p.zero_grad();
        }
    }

    /// SHA-256 over parameter names, shapes and raw bits.
    pub fn parameter_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.named_parameters() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records the forward pass for `images[B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, policy: &QuantizationPolicy) -> Result<ForwardPass> {
        self.forward_inner(tape, images, policy, None)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        policy: &QuantizationPolicy,
        recorder: Option<&mut ActivationRanges>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let patches = patchify(images, cfg)?;
        let batch = images.shape()[0];
        let mut ctx = Ctx {
            tape,
            policy,
            ranges: &self.act_ranges,
            recorder,
            bindings: Vec::new(),
            attention: Vec::new(),
        };

        let pe = ctx.bind_linear(PATCH_EMBED, &self.patch_embed);
        let cls = ctx.bind("cls_token".into(), &self.cls_token);
        let pos = ctx.bind("pos_embed".into(), &self.pos_embed);
        let px = ctx.tape.constant(&patches);
        let emb = ctx.linear(px, PATCH_EMBED, pe)?;
        let mut x = ctx.tape.assemble_tokens(emb, cls, pos, batch)?;

        for (i, block) in self.blocks.iter().enumerate() {
            let (g1, b1) = ctx.bind_norm(&format!("blocks.{i}.norm1"), &block.norm1);
            let h = ctx.tape.layernorm(x, g1, b1)?;
            let a = self.attention_in(&mut ctx, i, h, batch)?;
            x = ctx.tape.add(x, a)?;
            let (g2, b2) = ctx.bind_norm(&format!("blocks.{i}.norm2"), &block.norm2);
            let h = ctx.tape.layernorm(x, g2, b2)?;
            let m = self.mlp_in(&mut ctx, i, h)?;
            x = ctx.tape.add(x, m)?;
        }

        let (g, b) = ctx.bind_norm("norm", &self.norm);
        let x = ctx.tape.layernorm(x, g, b)?;
        let n = cfg.num_tokens();
        let rows: Vec<usize> = (0..batch).map(|s| s * n).collect();
        let cls_rows = ctx.tape.select_rows(x, &rows)?;
        let hd = ctx.bind_linear(HEAD, &self.head);
        let logits = ctx.linear(cls_rows, HEAD, hd)?;
        Ok(ForwardPass {
            logits,
            bindings: ctx.bindings,
            attention: ctx.attention,
        })
    }

    fn attention_in(&self, ctx: &mut Ctx<'_>, i: usize, h: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let block = &self.blocks[i];
        let id = |role: &str| format!("blocks.{i}.attn.{role}");
        let q = ctx.bind_linear(&id("q"), &block.q);
        let k = ctx.bind_linear(&id("k"), &block.k);
        let v = ctx.bind_linear(&id("v"), &block.v);
        let proj = ctx.bind_linear(&id("proj"), &block.proj);

        // one quantized copy of the block input feeds all three projections
        let hq = ctx.quant_act(h, &format!("blocks.{i}.attn.input"))?;
        let fq = ctx.linear_q(hq, &id("q"), q)?;
        let fk = ctx.linear_q(hq, &id("k"), k)?;
        let fv = ctx.linear_q(hq, &id("v"), v)?;
        let fq = ctx.quant_act(fq, &format!("blocks.{i}.attn.q_act"))?;
        let fk = ctx.quant_act(fk, &format!("blocks.{i}.attn.k_act"))?;
        let fv = ctx.quant_act(fv, &format!("blocks.{i}.attn.v_act"))?;

        let n = ctx.tape.shape(h)[0] / batch;
        let (hd, scale) = (cfg.head_dim(), cfg.attention_scale());
        let probs_site = format!("blocks.{i}.attn.probs");
        let mut samples = Vec::with_capacity(batch);
        for s in 0..batch {
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let qs = ctx.tape.slice(fq, s * n, n, head * hd, hd)?;
                let ks = ctx.tape.slice(fk, s * n, n, head * hd, hd)?;
                let vs = ctx.tape.slice(fv, s * n, n, head * hd, hd)?;
                let kt = ctx.tape.transpose(ks)?;
                let scores = ctx.tape.matmul(qs, kt)?;
                let scores = ctx.tape.scale(scores, scale);
                let a = ctx.tape.softmax_lastdim(scores)?;
                ctx.attention.push(a);
                let aq = ctx.quant_act(a, &probs_site)?;
                heads.push(ctx.tape.matmul(aq, vs)?);
            }
            samples.push(ctx.tape.concat_cols(&heads)?);
        }
        let merged = ctx.tape.concat_rows(&samples)?;
        ctx.linear(merged, &id("proj"), proj)
    }

    fn mlp_in(&self, ctx: &mut Ctx<'_>, i: usize, h: Var) -> Result<Var> {
        let block = &self.blocks[i];
        let fc1 = ctx.bind_linear(&format!("blocks.{i}.mlp.fc1"), &block.fc1);
        let fc2 = ctx.bind_linear(&format!("blocks.{i}.mlp.fc2"), &block.fc2);
        let hidden = ctx.linear(h, &format!("blocks.{i}.mlp.fc1"), fc1)?;
        let act = ctx.tape.gelu(hidden);
        ctx.linear(act, &format!("blocks.{i}.mlp.fc2"), fc2)
    }

    /// Self-attention of block `i` (projections, per-head softmax, concat and
    /// output projection) applied to token rows `x[B·n × d]`.
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        i: usize,
        x: Var,
        batch: usize,
        policy: &QuantizationPolicy,
    ) -> Result<ForwardPass> {
        self.check_block(tape, i, x, batch)?;
        let mut ctx = Ctx {
            tape,
            policy,
            ranges: &self.act_ranges,
            recorder: None,
            bindings: Vec::new(),
            attention: Vec::new(),
        };
        let out = self.attention_in(&mut ctx, i, x, batch)?;
        Ok(ForwardPass {
            logits: out,
            bindings: ctx.bindings,
            attention: ctx.attention,
        })
    }

    /// MLP of block `i`: `GeLU(x·W1 + b1)·W2 + b2`.
    pub fn mlp_block(&self, tape: &mut Tape, i: usize, x: Var, policy: &QuantizationPolicy) -> Result<ForwardPass> {
        self.check_block(tape, i, x, 1)?;
        let mut ctx = Ctx {
            tape,
            policy,
            ranges: &self.act_ranges,
            recorder: None,
            bindings: Vec::new(),
            attention: Vec::new(),
        };
        let out = self.mlp_in(&mut ctx, i, x)?;
        Ok(ForwardPass {
            logits: out,
            bindings: ctx.bindings,
            attention: ctx.attention,
        })
    }

    fn check_block(&self, tape: &Tape, i: usize, x: Var, batch: usize) -> Result<()> {
        if i >= self.blocks.len() {
            return Err(Error::Index {
                what: "blocks",
                index: i,
                len: self.blocks.len(),
            });
        }
        let shape = tape.shape(x);
        let d = self.config.embed_dim;
        let ok = shape.len() == 2 && shape[1] == d && batch > 0 && shape[0].is_multiple_of(batch);
        if !ok {
            return Err(Error::Dimension {
                op: "transformer block",
                lhs: shape.to_vec(),
                rhs: vec![batch, d],
            });
        }
        Ok(())
    }

    /// Adds the gradients of `pass`'s bindings into the parameter buffers.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, grads: &Gradients) -> Result<()> {
        let by_name: BTreeMap<&str, Var> = pass.bindings.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        for (name, p) in self.named_parameters_mut() {
            if let Some(&v) = by_name.get(name.as_str()) {
                grads.accumulate_into(v, p)?;
            }
        }
        Ok(())
    }

    /// Forward, cross-entropy and backward on one batch; gradients are
    /// accumulated into the parameters.
    pub fn loss_and_backward(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        policy: &QuantizationPolicy,
    ) -> Result<BatchStats> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, policy)?;
        let loss = tape.cross_entropy(pass.logits, labels)?;
        let stats = batch_stats(&tape, pass.logits, loss, labels);
        let grads = tape.backward(loss)?;
        self.accumulate_grads(&pass, &grads)?;
        Ok(stats)
    }

    /// Loss and accuracy without gradients.
    pub fn evaluate_batch(&self, images: &Tensor, labels: &[usize], policy: &QuantizationPolicy) -> Result<BatchStats> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, policy)?;
        let loss = tape.cross_entropy(pass.logits, labels)?;
        Ok(batch_stats(&tape, pass.logits, loss, labels))
    }

    /// Logits as an `f32` tensor.
    pub fn logits(&self, images: &Tensor, policy: &QuantizationPolicy) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, policy)?;
        Ok(tape.value(pass.logits))
    }

    /// Widens the stored activation ranges with the values seen on `images`
    /// (dynamic quantization is used during the pass itself).
    pub fn calibrate(&mut self, images: &Tensor, policy: &QuantizationPolicy) -> Result<()> {
        let mut dynamic = policy.clone();
        dynamic.calibration = Calibration::Dynamic;
        let mut ranges = std::mem::take(&mut self.act_ranges);
        let mut tape = Tape::new();
        let res = self.forward_inner(&mut tape, images, &dynamic, Some(&mut ranges));
        self.act_ranges = ranges;
        res.map(|_| ())
    }
}

fn batch_stats(tape: &Tape, logits: Var, loss: Var, labels: &[usize]) -> BatchStats {
    let c = tape.shape(logits)[1];
    let vals = tape.values(logits);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&vals[i * c..(i + 1) * c]) == l)
        .count();
    BatchStats {
        loss: tape.scalar(loss),
        correct,
        count: labels.len(),
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, id: &str, l: &'a Linear) {
    out.push((format!("{id}.weight"), &l.weight));
    if let Some(b) = &l.bias {
        out.push((format!("{id}.bias"), b));
    }
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, id: &str, n: &'a LayerNormParams) {
    out.push((format!("{id}.gamma"), &n.gamma));
    out.push((format!("{id}.beta"), &n.beta));
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, id: &str, l: &'a mut Linear) {
    out.push((format!("{id}.weight"), &mut l.weight));
    if let Some(b) = &mut l.bias {
        out.push((format!("{id}.bias"), b));
    }
}

fn push_norm_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, id: &str, n: &'a mut LayerNormParams) {
    out.push((format!("{id}.gamma"), &mut n.gamma));
    out.push((format!("{id}.beta"), &mut n.beta));
}
