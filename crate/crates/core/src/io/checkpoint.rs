//! Binary checkpoint container.
//!
//! ```text
//! magic    8 B   "TERVIT\0\x01"
//! version  u32   1
//! count    u32   number of table entries
//! entries        name_len u32, name, dtype u8, ndim u8, dims u64 × ndim,
//!                offset u64, length u64
//! padding        zeros up to a multiple of 64
//! payload        each tensor at a 64-byte aligned offset from payload start
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ActivationRanges, InferenceModel, ViTConfig, VisionTransformer, WeightKernel};
use crate::quantization::minmax::ChannelQuantized8;
use crate::quantization::pack::packed_len;
use crate::quantization::policy::PolicySpec;
use crate::quantization::TernaryTensor;
use crate::tensor::Tensor;
use crate::training::{AdamW, AdamWState, Moments};

pub const MAGIC: [u8; 8] = *b"TERVIT\0\x01";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

const CONFIG_DIGEST: &str = "__config_digest__";
const CONFIG: &str = "__config__";
const POLICY: &str = "__policy__";
const ACT_PREFIX: &str = "__act__.";
const OPTIM: &str = "__optim__";
const OPTIM_M: &str = "__optim__.m.";
const OPTIM_V: &str = "__optim__.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
    Packed2 = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            2 => Ok(Dtype::Packed2),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

/// A tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor),
    /// Opaque bytes (metadata).
    Bytes(Vec<u8>),
    /// 8-bit weights: row-major codes, then per-column scales and offsets.
    Int8(ChannelQuantized8),
    /// Packed ternary codes, then per-column scales.
    Packed2(TernaryTensor),
}

impl StoredTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            StoredTensor::F32(_) => Dtype::F32,
            StoredTensor::Bytes(_) | StoredTensor::Int8(_) => Dtype::U8,
            StoredTensor::Packed2(_) => Dtype::Packed2,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            StoredTensor::F32(t) => t.shape().to_vec(),
            StoredTensor::Bytes(b) => vec![b.len()],
            StoredTensor::Int8(q) => q.shape().to_vec(),
            StoredTensor::Packed2(t) => t.shape().to_vec(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let f32s = |v: &[f32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        match self {
            StoredTensor::F32(t) => f32s(t.data()),
            StoredTensor::Bytes(b) => b.clone(),
            StoredTensor::Int8(q) => {
                let mut out = q.codes().to_vec();
                out.extend(f32s(&q.scales()));
                out.extend(f32s(&q.offsets()));
                out
            }
            StoredTensor::Packed2(t) => {
                let mut out = t.packed().to_vec();
                out.extend(f32s(t.alpha()));
                out
            }
        }
    }

    fn decode(name: &str, dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let count: usize = shape.iter().product();
        let f32s = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let bad_len = |expect: usize| {
            Error::Format(format!(
                "tensor `{name}`: {:?} payload for shape {shape:?} must be {expect} bytes, got {}",
                dtype,
                bytes.len()
            ))
        };
        match dtype {
            Dtype::F32 => {
                if bytes.len() != 4 * count {
                    return Err(bad_len(4 * count));
                }
                Ok(StoredTensor::F32(Tensor::new(shape.to_vec(), f32s(bytes))?))
            }
            Dtype::U8 => match *shape {
                [len] if bytes.len() == len => Ok(StoredTensor::Bytes(bytes.to_vec())),
                [rows, cols] => {
                    if bytes.len() != count + 8 * cols {
                        return Err(bad_len(count + 8 * cols));
                    }
                    let scales = f32s(&bytes[count..count + 4 * cols]);
                    let offsets = f32s(&bytes[count + 4 * cols..]);
                    Ok(StoredTensor::Int8(ChannelQuantized8::from_parts(
                        rows,
                        cols,
                        bytes[..count].to_vec(),
                        &scales,
                        &offsets,
                    )?))
                }
                _ => Err(bad_len(count)),
            },
            Dtype::Packed2 => {
                let &[rows, cols] = shape else {
                    return Err(Error::Format(format!(
                        "tensor `{name}`: packed2 needs a 2-D shape, got {shape:?}"
                    )));
                };
                let codes = packed_len(count);
                if bytes.len() != codes + 4 * cols {
                    return Err(bad_len(codes + 4 * cols));
                }
                let t = TernaryTensor::from_packed(rows, cols, bytes[..codes].to_vec(), f32s(&bytes[codes..]))?;
                // reject 0b11 codes up front
                t.codes()?;
                Ok(StoredTensor::Packed2(t))
            }
        }
    }

    /// Float view (quantized tensors are dequantized).
    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            StoredTensor::F32(t) => Ok(t.clone()),
            StoredTensor::Bytes(b) => Err(Error::Contract(format!(
                "{}-byte metadata blob is not a numeric tensor",
                b.len()
            ))),
            StoredTensor::Int8(q) => Ok(q.dequantize()),
            StoredTensor::Packed2(t) => t.dequantize(),
        }
    }
}

/// SHA-256 of the canonical TOML form of `config`.
pub fn config_digest(config: &ViTConfig) -> Result<[u8; 32]> {
    Ok(Sha256::digest(config_text(config)?.as_bytes()).into())
}

fn config_text(config: &ViTConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Contract(format!("config not serializable: {e}")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

/// A model (latent or quantized), its policy, calibration ranges and
/// optionally the optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub policy: Option<PolicySpec>,
    /// Parameters in model order.
    pub tensors: Vec<(String, StoredTensor)>,
    pub act_ranges: ActivationRanges,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Latent `f32` parameters.
    pub fn from_model(model: &VisionTransformer, policy: Option<&PolicySpec>, optimizer: Option<&AdamW>) -> Self {
        Self {
            config: model.config.clone(),
            policy: policy.cloned(),
            tensors: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, StoredTensor::F32(t.detach())))
                .collect(),
            act_ranges: model.act_ranges.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Linear weights stored at the policy's precision (packed ternary,
    /// 8-bit codes or `f32`); everything else stays `f32`.
    pub fn quantized(model: &VisionTransformer, spec: &PolicySpec) -> Result<Self> {
        let policy = model.config.policy(spec)?;
        let compiled = InferenceModel::compile(model, &policy)?;
        let weights = compiled.weights();
        let tensors = model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| {
                let stored = match n.strip_suffix(".weight").and_then(|id| weights.get(id)) {
                    Some(WeightKernel::Ternary(tt)) => StoredTensor::Packed2(tt.clone()),
                    Some(WeightKernel::Int8(q)) => StoredTensor::Int8(q.clone()),
                    _ => StoredTensor::F32(t.detach()),
                };
                (n, stored)
            })
            .collect();
        Ok(Self {
            config: model.config.clone(),
            policy: Some(spec.clone()),
            tensors,
            act_ranges: model.act_ranges.clone(),
            optimizer: None,
        })
    }

    /// Rebuilds the model; quantized tensors come back dequantized.
    pub fn to_model(&self) -> Result<VisionTransformer> {
        let mut model = VisionTransformer::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let stored: BTreeMap<&str, &StoredTensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected = model.named_parameters().len();
        if stored.len() != expected {
            return Err(Error::Contract(format!(
                "checkpoint holds {} parameter tensors, model expects {expected}",
                stored.len()
            )));
        }
        for (name, p) in model.named_parameters_mut() {
            let src = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter `{name}`")))?
                .to_tensor()?;
            if src.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "Checkpoint::to_model",
                    lhs: src.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            p.data_mut().copy_from_slice(src.data());
        }
        model.act_ranges = self.act_ranges.clone();
        Ok(model)
    }

    fn entries(&self) -> Result<Vec<(String, StoredTensor)>> {
        let config = config_text(&self.config)?;
        let mut out = vec![
            (
                CONFIG_DIGEST.to_string(),
                StoredTensor::Bytes(config_digest(&self.config)?.to_vec()),
            ),
            (CONFIG.to_string(), StoredTensor::Bytes(config.into_bytes())),
        ];
        if let Some(p) = &self.policy {
            let text = toml::to_string(p).map_err(|e| Error::Contract(format!("policy not serializable: {e}")))?;
            out.push((POLICY.to_string(), StoredTensor::Bytes(text.into_bytes())));
        }
        for (name, t) in &self.tensors {
            if name.starts_with("__") {
                return Err(Error::Contract(format!(
                    "parameter name `{name}` uses the reserved prefix"
                )));
            }
            out.push((name.clone(), t.clone()));
        }
        for (site, &(lo, hi)) in &self.act_ranges {
            out.push((
                format!("{ACT_PREFIX}{site}"),
                StoredTensor::F32(Tensor::new(vec![2], vec![lo, hi])?),
            ));
        }
        if let Some(opt) = &self.optimizer {
            let meta = OptimMeta {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
                step: opt.state.step,
            };
            let text = toml::to_string(&meta).map_err(|e| Error::Contract(e.to_string()))?;
            out.push((OPTIM.to_string(), StoredTensor::Bytes(text.into_bytes())));
            for (name, m) in &opt.state.moments {
                out.push((format!("{OPTIM_M}{name}"), StoredTensor::F32(m.m.clone())));
                out.push((format!("{OPTIM_V}{name}"), StoredTensor::F32(m.v.clone())));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries()?;
        let payloads: Vec<Vec<u8>> = entries.iter().map(|(_, t)| t.encode()).collect();

        let mut table = Vec::new();
        let mut offset = 0usize;
        for ((name, t), bytes) in entries.iter().zip(&payloads) {
            let shape = t.shape();
            table.extend((name.len() as u32).to_le_bytes());
            table.extend(name.as_bytes());
            table.push(t.dtype() as u8);
            table.push(shape.len() as u8);
            for d in &shape {
                table.extend((*d as u64).to_le_bytes());
            }
            table.extend((offset as u64).to_le_bytes());
            table.extend((bytes.len() as u64).to_le_bytes());
            offset = align(offset + bytes.len());
        }

        let mut out = Vec::with_capacity(16 + table.len() + offset + ALIGN);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((entries.len() as u32).to_le_bytes());
        out.extend(table);
        out.resize(align(out.len()), 0);
        let base = out.len();
        let mut offset = 0usize;
        for bytes in &payloads {
            out.resize(base + offset, 0);
            out.extend(bytes);
            offset = align(offset + bytes.len());
        }
        Ok(out)
    }

    /// Parses a checkpoint. With `expected`, the stored config digest is
    /// compared before any tensor is decoded.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ViTConfig>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("entry count")? as usize;
        let mut table = Vec::new();
        for i in 0..count {
            let what = format!("table entry {i}");
            let len = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(len, &what)?.to_vec())
                .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?;
            let dtype = Dtype::from_byte(r.u8(&what)?)?;
            let ndim = r.u8(&what)? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64(&what).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64(&what)? as usize;
            let length = r.u64(&what)? as usize;
            table.push(TableEntry {
                name,
                dtype,
                shape,
                offset,
                length,
            });
        }
        let base = align(r.pos);
        // the whole payload must be present before anything is decoded
        let end = table
            .iter()
            .map(|e| e.offset.checked_add(e.length).and_then(|x| x.checked_add(base)))
            .try_fold(base, |acc, e| e.map(|e| acc.max(e)))
            .ok_or_else(|| Error::Format("tensor extent overflows".into()))?;
        if bytes.len() < end {
            return Err(Error::UnexpectedEof {
                what: "checkpoint payload".into(),
                needed: end,
                available: bytes.len(),
            });
        }
        let payload = |e: &TableEntry| &bytes[base + e.offset..base + e.offset + e.length];
        let find = |name: &str| {
            table
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };

        let digest = payload(find(CONFIG_DIGEST)?);
        if let Some(cfg) = expected {
            if digest != config_digest(cfg)? {
                return Err(Error::Contract(
                    "checkpoint config digest does not match the expected config".into(),
                ));
            }
        }
        let text =
            std::str::from_utf8(payload(find(CONFIG)?)).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config: ViTConfig = toml::from_str(text).map_err(|e| Error::Format(format!("stored config: {e}")))?;
        if digest != config_digest(&config)? {
            return Err(Error::Format("stored config does not match its digest".into()));
        }

        let mut ckpt = Checkpoint {
            config,
            policy: None,
            tensors: Vec::new(),
            act_ranges: ActivationRanges::new(),
            optimizer: None,
        };
        let mut meta: Option<OptimMeta> = None;
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for e in &table {
            let raw = payload(e);
            let utf8 = || std::str::from_utf8(raw).map_err(|_| Error::Format(format!("`{}` is not UTF-8", e.name)));
            match e.name.as_str() {
                CONFIG_DIGEST | CONFIG => {}
                POLICY => {
                    ckpt.policy =
                        Some(toml::from_str(utf8()?).map_err(|err| Error::Format(format!("stored policy: {err}")))?)
                }
                OPTIM => {
                    meta =
                        Some(toml::from_str(utf8()?).map_err(|err| Error::Format(format!("optimizer state: {err}")))?)
                }
                name => {
                    let t = StoredTensor::decode(name, e.dtype, &e.shape, raw)?;
                    if let Some(site) = name.strip_prefix(ACT_PREFIX) {
                        let t = t.to_tensor()?;
                        let &[lo, hi] = t.data() else {
                            return Err(Error::Format(format!("range `{site}` must hold 2 values")));
                        };
                        ckpt.act_ranges.insert(site.to_string(), (lo, hi));
                    } else if let Some(p) = name.strip_prefix(OPTIM_M) {
                        moments.entry(p.to_string()).or_default().0 = Some(t.to_tensor()?);
                    } else if let Some(p) = name.strip_prefix(OPTIM_V) {
                        moments.entry(p.to_string()).or_default().1 = Some(t.to_tensor()?);
                    } else if name.starts_with("__") {
                        return Err(Error::Format(format!("unknown reserved entry `{name}`")));
                    } else {
                        ckpt.tensors.push((name.to_string(), t));
                    }
                }
            }
        }
        match meta {
            Some(m) => {
                let moments = moments
                    .into_iter()
                    .map(|(name, mv)| match mv {
                        (Some(m), Some(v)) => Ok((name, Moments { m, v })),
                        _ => Err(Error::Format(format!("optimizer moments of `{name}` are incomplete"))),
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                ckpt.optimizer = Some(AdamW {
                    beta1: m.beta1,
                    beta2: m.beta2,
                    eps: m.eps,
                    weight_decay: m.weight_decay,
                    state: AdamWState { step: m.step, moments },
                });
            }
            None if !moments.is_empty() => {
                return Err(Error::Format("optimizer moments without optimizer header".into()))
            }
            None => {}
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ViTConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

struct TableEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::UnexpectedEof {
                what: what.to_string(),
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = VisionTransformer::new(ViTConfig::toy(), &mut rng).unwrap();
        let bytes = Checkpoint::from_model(&model, None, None).to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"TERVIT\0\x01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(count, 2 + model.named_parameters().len());
        let name_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + name_len], CONFIG_DIGEST.as_bytes());
    }

    #[test]
    fn align_rounds_up() {
        assert_eq!(align(0), 0);
        assert_eq!(align(1), 64);
        assert_eq!(align(64), 64);
        assert_eq!(align(65), 128);
    }
}
