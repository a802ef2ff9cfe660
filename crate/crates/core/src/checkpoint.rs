//! Binary checkpoint container for model weights, adapters and conditions.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"CLORA1"
//! version u16
//! header  u32 x 6: height, width, image channels, channels, embedding dim, T
//! count   u32
//! entry*  u16 name length, utf-8 name, u8 dtype (1 = f64), u8 ndim,
//!         u32 x ndim dims, f64 x prod(dims) payload
//! ```
//!
//! Entry names: `model.<param>`, `lora.<block>.<weight>.{A,B}`,
//! `lora.<block>.alpha`, `lora.<block>.frozen`, `lora.source` and
//! `cond.<name>`. Scalars are stored with ndim 0.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{Block, ImageSource, LoraAdapter, LoraPair, LoraSet};
use crate::model::{ConditionTable, DenoiserModel, ModelConfig, IMAGE_CHANNELS};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CLORA1";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub height: u32,
    pub width: u32,
    pub image_channels: u32,
    pub channels: u32,
    pub embedding_dim: u32,
    pub timesteps: u32,
}

impl CheckpointHeader {
    pub fn new(cfg: &ModelConfig, timesteps: usize) -> Self {
        Self {
            height: cfg.height as u32,
            width: cfg.width as u32,
            image_channels: IMAGE_CHANNELS as u32,
            channels: cfg.channels as u32,
            embedding_dim: cfg.embedding_dim as u32,
            timesteps: timesteps as u32,
        }
    }

    /// Errors unless the header describes the same model shape and `T`.
    pub fn check_matches(&self, cfg: &ModelConfig, timesteps: usize) -> Result<()> {
        let want = Self::new(cfg, timesteps);
        if *self != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint header {self:?} does not match configuration {want:?}"
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            height: self.height as usize,
            width: self.width as usize,
            channels: self.channels as usize,
            embedding_dim: self.embedding_dim as usize,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub entries: Vec<(String, Tensor)>,
}

fn scalar0(v: f64) -> Tensor {
    Tensor::new(vec![], vec![v]).expect("rank-0 tensor holds one value")
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ckpt_err(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self {
            header,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name).ok_or_else(|| ckpt_err(format!("missing entry `{name}`")))?;
        if t.numel() != 1 {
            return Err(ckpt_err(format!("`{name}` should be a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let h = &self.header;
        for v in [h.height, h.width, h.image_channels, h.channels, h.embedding_dim, h.timesteps] {
            w.write_all(&v.to_le_bytes())?;
        }
        let count = u32::try_from(self.entries.len()).map_err(|_| ckpt_err("too many entries"))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| ckpt_err(format!("entry name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let ndim = u8::try_from(t.shape().len()).map_err(|_| ckpt_err(format!("`{name}` has too many dims")))?;
            w.write_all(&[DTYPE_F64, ndim])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| ckpt_err(format!("`{name}` dim too large")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0; 6];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(ckpt_err("bad magic, not a checkpoint"));
        }
        let version = read_u16(r, "version")?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut hv = [0u32; 6];
        for v in hv.iter_mut() {
            *v = read_u32(r, "header")?;
        }
        let header = CheckpointHeader {
            height: hv[0],
            width: hv[1],
            image_channels: hv[2],
            channels: hv[3],
            embedding_dim: hv[4],
            timesteps: hv[5],
        };
        let count = read_u32(r, "entry count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let len = read_u16(r, "entry name length")? as usize;
            let mut name = vec![0; len];
            read_exact(r, &mut name, "entry name")?;
            let name = String::from_utf8(name).map_err(|_| ckpt_err(format!("entry {i} name is not utf-8")))?;
            let dtype = read_u8(r, "dtype")?;
            if dtype != DTYPE_F64 {
                return Err(ckpt_err(format!("`{name}` has unknown dtype tag {dtype}")));
            }
            let ndim = read_u8(r, "ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r, "dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ckpt_err(format!("`{name}` size overflows")))?;
            let mut raw = vec![0; n.checked_mul(8).ok_or_else(|| ckpt_err(format!("`{name}` size overflows")))?];
            read_exact(r, &mut raw, &format!("payload of `{name}`"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ckpt_err("trailing bytes after last entry"));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
            .map_err(|e| ckpt_err(format!("{}: {e}", path.display())))
    }

    pub fn from_model(model: &DenoiserModel, timesteps: usize) -> Self {
        let mut c = Self::new(CheckpointHeader::new(model.config(), timesteps));
        for (name, t) in model.enumerate_parameters() {
            c.push(format!("model.{name}"), t.clone());
        }
        c
    }

    pub fn to_model(&self, seed: u64) -> Result<DenoiserModel> {
        let params: BTreeMap<String, Tensor> = self
            .entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("model.").map(|k| (k.to_string(), t.clone())))
            .collect();
        if params.is_empty() {
            return Err(ckpt_err("no model entries"));
        }
        DenoiserModel::from_parameters(self.header.model_config(seed), params)
    }

    pub fn from_lora(header: CheckpointHeader, set: &LoraSet, conditions: &ConditionTable) -> Self {
        let mut c = Self::new(header);
        let source = match set.source {
            ImageSource::ContentImage => 0.0,
            ImageSource::StyleImage => 1.0,
        };
        c.push("lora.source", scalar0(source));
        for b in Block::ALL {
            let Some(a) = set.adapter(b) else { continue };
            let k = b.key();
            c.push(format!("lora.{k}.alpha"), scalar0(a.alpha));
            c.push(format!("lora.{k}.frozen"), scalar0(if set.is_frozen(b) { 1.0 } else { 0.0 }));
            for (w, p) in &a.pairs {
                c.push(format!("lora.{k}.{w}.A"), p.a.clone());
                c.push(format!("lora.{k}.{w}.B"), p.b.clone());
            }
        }
        for (name, v) in conditions.iter() {
            c.push(format!("cond.{name}"), Tensor::from_vec(v.clone()));
        }
        c
    }

    pub fn to_lora(&self) -> Result<(LoraSet, ConditionTable)> {
        let source = match self.scalar("lora.source")? {
            0.0 => ImageSource::ContentImage,
            1.0 => ImageSource::StyleImage,
            v => return Err(ckpt_err(format!("bad lora.source {v}"))),
        };
        let mut set = LoraSet::new(source);
        for b in Block::ALL {
            let k = b.key();
            let prefix = format!("lora.{k}.");
            if self.get(&format!("{prefix}alpha")).is_none() {
                continue;
            }
            let alpha = self.scalar(&format!("{prefix}alpha"))?;
            let frozen = self.scalar(&format!("{prefix}frozen"))? != 0.0;
            let mut pairs = BTreeMap::new();
            for (n, t) in &self.entries {
                let Some(rest) = n.strip_prefix(&prefix) else { continue };
                let Some(w) = rest.strip_suffix(".A") else { continue };
                let b_t = self
                    .get(&format!("{prefix}{w}.B"))
                    .ok_or_else(|| ckpt_err(format!("`{n}` has no matching B")))?;
                pairs.insert(w.to_string(), LoraPair { a: t.clone(), b: b_t.clone() });
            }
            let rank = pairs
                .values()
                .next()
                .map(|p| p.a.shape()[0])
                .ok_or_else(|| ckpt_err(format!("{k} adapter has no weights")))?;
            if pairs.values().any(|p| p.a.shape().len() != 2 || p.a.shape()[0] != rank || p.b.shape().len() != 2 || p.b.shape()[1] != rank) {
                return Err(ckpt_err(format!("{k} adapter has inconsistent ranks")));
            }
            set.set_adapter(LoraAdapter {
                target: b,
                rank,
                alpha,
                pairs,
            });
            set.set_frozen(b, frozen);
        }
        let mut conditions = ConditionTable::new(self.header.embedding_dim as usize);
        for (n, t) in &self.entries {
            if let Some(name) = n.strip_prefix("cond.") {
                conditions.insert(name, t.data().to_vec())?;
            }
        }
        Ok((set, conditions))
    }
}
