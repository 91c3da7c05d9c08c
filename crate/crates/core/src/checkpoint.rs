//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EDMCKPT1"
//! version  u16
//! count    u32      number of manifest entries
//! entry*   u16 name length, ASCII name, u8 dtype (0 = f32), u8 rank,
//!          rank x u64 dims, u64 byte offset into the payload
//! length   u64      payload size in bytes
//! payload  f32 arrays, back to back
//! crc      u32      CRC-32 (IEEE) of the payload
//! ```
//!
//! Scalars that must survive exactly (seeds, schedule constants) are stored
//! as their 64-bit pattern split into four 16-bit limbs, each of which is an
//! exactly representable f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{FeatureEncoder, PromptPair};
use crate::nn::{Activation, Mlp};
use crate::score::{GaussianPrior, ScoreNetwork};
use crate::sde::DiffusionSchedule;

pub const MAGIC: &[u8; 8] = b"EDMCKPT1";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if !name.is_ascii() || name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("tensor name {name:?} must be short ASCII")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Config(format!("tensor {name}: shape {shape:?} does not hold {} values", data.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::Config(format!("duplicate tensor {name}")));
        }
        self.tensors.push(Tensor { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.insert(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    /// Stores `value` bit-exactly.
    pub fn insert_exact(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert_u64(name, value.to_bits())
    }

    pub fn insert_u64(&mut self, name: &str, value: u64) -> Result<()> {
        let limbs = (0..4).map(|i| ((value >> (16 * i)) & 0xffff) as f32).collect();
        self.insert(name, vec![4], limbs)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format { path: "<checkpoint>".into(), reason: format!("missing tensor {name}") })
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.require(name)?.data.iter().map(|&v| v as f64).collect())
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let t = self.require(name)?;
        if t.data.len() != 4 {
            return Err(bad(format!("{name} is not a 64-bit scalar")));
        }
        let mut v = 0u64;
        for (i, &limb) in t.data.iter().enumerate() {
            if !(0.0..=65535.0).contains(&limb) || limb.fract() != 0.0 {
                return Err(bad(format!("{name} has an invalid limb {limb}")));
            }
            v |= (limb as u64) << (16 * i);
        }
        Ok(v)
    }

    pub fn exact(&self, name: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(name)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        let start = out.len();
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .ok()
                .filter(|s| s.is_ascii())
                .ok_or_else(|| bad("non-ASCII tensor name".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(bad(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let offset = u64::from_le_bytes(r.array()?) as usize;
            manifest.push((name, shape, offset));
        }
        let length = u64::from_le_bytes(r.array()?) as usize;
        let payload = r.take(length)?;
        let stored = u32::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after checksum".into()));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut ckpt = Checkpoint::new();
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let end = offset.checked_add(4 * n).filter(|&e| e <= payload.len());
            let end = end.ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.insert(&name, shape, data)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format { path: path.display().to_string(), reason },
            other => other,
        })
    }

    /// CRC-32 of the payload, as stored in the trailer.
    pub fn checksum(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("four bytes"))
    }
}

fn bad(reason: String) -> Error {
    Error::Format { path: "<checkpoint>".into(), reason }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn store_mlp(ckpt: &mut Checkpoint, prefix: &str, mlp: &Mlp) -> Result<()> {
    let dims: Vec<f64> = mlp.dims().iter().map(|&d| d as f64).collect();
    ckpt.insert_f64(&format!("{prefix}.dims"), vec![dims.len()], &dims)?;
    for (k, l) in mlp.layers().iter().enumerate() {
        ckpt.insert_f64(&format!("{prefix}.layer{k}.weight"), vec![l.outputs, l.inputs], mlp.layer_weights(k))?;
        ckpt.insert_f64(&format!("{prefix}.layer{k}.bias"), vec![l.outputs], mlp.layer_bias(k))?;
    }
    Ok(())
}

fn read_mlp(ckpt: &Checkpoint, prefix: &str, hidden: Activation, last: Activation) -> Result<Mlp> {
    let dims: Vec<usize> = ckpt.f64s(&format!("{prefix}.dims"))?.iter().map(|&d| d as usize).collect();
    if dims.len() < 2 {
        return Err(bad(format!("{prefix} has no layers")));
    }
    let mut acts = vec![hidden; dims.len() - 2];
    acts.push(last);
    let mut mlp = Mlp::zeros(&dims, &acts);
    for k in 0..dims.len() - 1 {
        let w = ckpt.f64s(&format!("{prefix}.layer{k}.weight"))?;
        let b = ckpt.f64s(&format!("{prefix}.layer{k}.bias"))?;
        if w.len() != dims[k] * dims[k + 1] || b.len() != dims[k + 1] {
            return Err(bad(format!("{prefix}.layer{k} does not match the recorded dims")));
        }
        mlp.set_layer_weights(k, &w);
        mlp.set_layer_bias(k, &b);
    }
    Ok(mlp)
}

pub fn score_to_checkpoint(net: &ScoreNetwork, seed: u64) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    c.insert_exact("meta.beta_min", net.schedule().beta_min())?;
    c.insert_exact("meta.beta_max", net.schedule().beta_max())?;
    c.insert_exact("meta.t_min", net.t_min())?;
    c.insert_u64("meta.seed", seed)?;
    store_mlp(&mut c, "score", net.mlp())?;
    if let Some(p) = net.prior() {
        let d = p.dim();
        c.insert_f64("prior.mean", vec![d], &p.mean)?;
        c.insert_f64("prior.eigenvalues", vec![d], &p.eigenvalues)?;
        c.insert_f64("prior.eigenvectors", vec![d, d], &p.eigenvectors)?;
    }
    Ok(c)
}

pub fn score_from_checkpoint(c: &Checkpoint) -> Result<ScoreNetwork> {
    let schedule = DiffusionSchedule::new(c.exact("meta.beta_min")?, c.exact("meta.beta_max")?)?;
    let mlp = read_mlp(c, "score", Activation::Silu, Activation::Identity)?;
    let prior = match c.get("prior.mean") {
        Some(_) => Some(GaussianPrior {
            mean: c.f64s("prior.mean")?,
            eigenvalues: c.f64s("prior.eigenvalues")?,
            eigenvectors: c.f64s("prior.eigenvectors")?,
        }),
        None => None,
    };
    if let Some(p) = &prior {
        let d = p.dim();
        if p.eigenvalues.len() != d || p.eigenvectors.len() != d * d {
            return Err(bad("prior arrays disagree in size".into()));
        }
    }
    ScoreNetwork::from_parts(mlp, prior, schedule, c.exact("meta.t_min")?)
}

/// Encoder and prompts share one file.
pub fn prompts_to_checkpoint(encoder: &FeatureEncoder, prompts: &PromptPair, seed: u64) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    c.insert_u64("meta.encoder_seed", encoder.seed())?;
    c.insert_u64("meta.seed", seed)?;
    c.insert_exact("encoder.scale", encoder.feature_scale())?;
    store_mlp(&mut c, "encoder", encoder.network())?;
    c.insert_f64("prompts.positive", vec![prompts.dim()], &prompts.positive)?;
    c.insert_f64("prompts.negative", vec![prompts.dim()], &prompts.negative)?;
    Ok(c)
}

pub fn prompts_from_checkpoint(c: &Checkpoint) -> Result<(FeatureEncoder, PromptPair)> {
    let net = read_mlp(c, "encoder", Activation::Tanh, Activation::Tanh)?;
    let encoder = FeatureEncoder::from_layers(net, c.exact("encoder.scale")?, c.u64("meta.encoder_seed")?)?;
    let prompts = PromptPair { positive: c.f64s("prompts.positive")?, negative: c.f64s("prompts.negative")? };
    if prompts.positive.len() != encoder.embed_dim() || prompts.negative.len() != encoder.embed_dim() {
        return Err(bad("prompt size does not match the encoder".into()));
    }
    Ok((encoder, prompts))
}
