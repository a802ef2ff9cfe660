//! Low-rank adapters on the two designated denoiser blocks.
//!
//! An adapter holds one `(A, B)` pair per adapted weight. With `A` shaped
//! `[r, d_in]` and `B` shaped `[d_out, r]` the weight delta is
//! `(alpha / r) * B * A`, scaled further by a per-use strength.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ops, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the gaussian `A` initialisation.
pub const A_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Content,
    Style,
}

impl Block {
    pub const ALL: [Block; 2] = [Block::Content, Block::Style];

    /// Parameter-name prefix of the block inside the denoiser.
    pub fn module_name(self) -> &'static str {
        match self {
            Block::Content => "content_block",
            Block::Style => "style_block",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Block::Content => "content",
            Block::Style => "style",
        }
    }
}

/// Which training image an adapter set was learned from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    ContentImage,
    StyleImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: Block,
    pub rank: usize,
    pub alpha: f64,
    /// Keyed by the adapted weight's name relative to the block, e.g. `conv1`.
    pub pairs: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    /// Fresh adapter with `B = 0` and `A ~ N(0, 0.01^2)`.
    ///
    /// `weights` lists `(name, d_out, d_in)` for each adapted weight.
    pub fn new<R: Rng + ?Sized>(
        target: Block,
        weights: &[(&str, usize, usize)],
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for &(name, d_out, d_in) in weights {
            if rank == 0 || rank > d_in.min(d_out) {
                return Err(Error::Lora(format!(
                    "rank {rank} invalid for `{name}` ({d_out}x{d_in})"
                )));
            }
            pairs.insert(
                name.to_string(),
                LoraPair {
                    a: Tensor::randn(&[rank, d_in], A_INIT_STD, rng),
                    b: Tensor::zeros(&[d_out, rank]),
                },
            );
        }
        Ok(Self {
            target,
            rank,
            alpha,
            pairs,
        })
    }

    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn pair(&self, weight: &str) -> Result<&LoraPair> {
        self.pairs
            .get(weight)
            .ok_or_else(|| Error::Lora(format!("no adapter entry for `{weight}`")))
    }

    /// `strength * (alpha / r) * B * A`.
    pub fn delta(&self, weight: &str, strength: f64) -> Result<Tensor> {
        let p = self.pair(weight)?;
        let ba = ops::matmul(&p.b, &p.a)?;
        Ok(ops::scale(&ba, strength * self.scale()))
    }

    /// `W x + strength * (alpha / r) * B (A x)` for `x` shaped `[d_in, n]`.
    pub fn apply(&self, weight: &str, base_weight: &Tensor, x: &Tensor, strength: f64) -> Result<Tensor> {
        let p = self.pair(weight)?;
        if base_weight.shape() != [p.b.shape()[0], p.a.shape()[1]] {
            return Err(shape_err(
                "lora_apply",
                format!("base {:?} vs adapter {:?}x{:?}", base_weight.shape(), p.b.shape(), p.a.shape()),
            ));
        }
        let base = ops::matmul(base_weight, x)?;
        let low = ops::matmul(&p.b, &ops::matmul(&p.a, x)?)?;
        ops::add(&base, &ops::scale(&low, strength * self.scale()))
    }

    /// Materialises `W + strength * (alpha / r) * B A`.
    pub fn merge(&self, weight: &str, base_weight: &Tensor, strength: f64) -> Result<Tensor> {
        let d = self.delta(weight, strength)?;
        if d.shape() != base_weight.shape() {
            return Err(shape_err(
                "lora_merge",
                format!("base {:?} vs delta {:?}", base_weight.shape(), d.shape()),
            ));
        }
        ops::add(base_weight, &d)
    }

    /// Named parameters in a stable order: `<weight>.A`, `<weight>.B`.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.pairs
            .iter()
            .flat_map(|(n, p)| [(format!("{n}.A"), &p.a), (format!("{n}.B"), &p.b)])
            .collect()
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (w, which) = name.rsplit_once('.')?;
        let p = self.pairs.get_mut(w)?;
        match which {
            "A" => Some(&mut p.a),
            "B" => Some(&mut p.b),
            _ => None,
        }
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.rank.to_le_bytes());
        h.update(self.alpha.to_le_bytes());
        for (name, t) in self.parameters() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn is_zero_delta(&self) -> bool {
        self.pairs.values().all(|p| p.b.data().iter().all(|v| *v == 0.0))
    }

    /// Records every pair on `tape`; trainable pairs become parameters.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, strength: f64) -> BoundLora {
        let pairs = self
            .pairs
            .iter()
            .map(|(n, p)| {
                let a = tape.leaf(p.a.clone(), trainable);
                let b = tape.leaf(p.b.clone(), trainable);
                (n.clone(), (a, b))
            })
            .collect();
        BoundLora {
            target: self.target,
            factor: strength * self.scale(),
            pairs,
        }
    }
}

/// An adapter recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundLora {
    pub target: Block,
    /// `strength * alpha / r`.
    pub factor: f64,
    pub pairs: BTreeMap<String, (Var, Var)>,
}

impl BoundLora {
    /// Taped `W + factor * B A`; matches [`LoraAdapter::merge`] bit for bit.
    pub fn merged_weight(&self, tape: &mut Tape, weight: &str, base: Var) -> Result<Var> {
        let Some(&(a, b)) = self.pairs.get(weight) else {
            return Ok(base);
        };
        let ba = tape.matmul(b, a)?;
        let scaled = tape.scale(ba, self.factor);
        tape.add(base, scaled)
    }

    /// `(name, var)` for every entry, using [`LoraAdapter::parameters`] naming.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.pairs
            .iter()
            .flat_map(|(n, &(a, b))| [(format!("{n}.A"), a), (format!("{n}.B"), b)])
            .collect()
    }
}

/// Content and style adapters learned from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub source: ImageSource,
    pub content: Option<LoraAdapter>,
    pub style: Option<LoraAdapter>,
    content_frozen: bool,
    style_frozen: bool,
}

impl LoraSet {
    pub fn new(source: ImageSource) -> Self {
        Self {
            source,
            content: None,
            style: None,
            content_frozen: false,
            style_frozen: false,
        }
    }

    pub fn adapter(&self, which: Block) -> Option<&LoraAdapter> {
        match which {
            Block::Content => self.content.as_ref(),
            Block::Style => self.style.as_ref(),
        }
    }

    pub fn adapter_mut(&mut self, which: Block) -> Option<&mut LoraAdapter> {
        match which {
            Block::Content => self.content.as_mut(),
            Block::Style => self.style.as_mut(),
        }
    }

    pub fn set_adapter(&mut self, adapter: LoraAdapter) {
        match adapter.target {
            Block::Content => self.content = Some(adapter),
            Block::Style => self.style = Some(adapter),
        }
    }

    fn require(&self, which: Block) -> Result<&LoraAdapter> {
        self.adapter(which)
            .ok_or_else(|| Error::Lora(format!("no {} adapter in set", which.key())))
    }

    pub fn freeze(&mut self, which: Block) -> Result<()> {
        self.require(which)?;
        match which {
            Block::Content => self.content_frozen = true,
            Block::Style => self.style_frozen = true,
        }
        Ok(())
    }

    pub fn set_frozen(&mut self, which: Block, frozen: bool) {
        match which {
            Block::Content => self.content_frozen = frozen,
            Block::Style => self.style_frozen = frozen,
        }
    }

    pub fn is_frozen(&self, which: Block) -> bool {
        match which {
            Block::Content => self.content_frozen,
            Block::Style => self.style_frozen,
        }
    }

    /// True when the adapter's current fingerprint equals `fingerprint`.
    pub fn assert_frozen(&self, which: Block, fingerprint: &str) -> Result<bool> {
        Ok(self.require(which)?.fingerprint() == fingerprint)
    }

    /// Present, unfrozen adapters.
    pub fn trainable_blocks(&self) -> Vec<Block> {
        Block::ALL
            .into_iter()
            .filter(|b| self.adapter(*b).is_some() && !self.is_frozen(*b))
            .collect()
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        Block::ALL
            .into_iter()
            .filter_map(|b| self.adapter(b).map(|a| (b.key().to_string(), a.fingerprint())))
            .collect()
    }
}
