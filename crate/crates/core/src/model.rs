//! Small convolutional noise predictor.
//!
//! ```text
//! x --conv_in--> h --content_block--> h --style_block--> h --silu, conv_out--> eps
//!                        ^                     ^
//!             silu(time_proj(sin_emb(t)) + cond_proj(c))
//! ```
//!
//! Each block is residual: `h + conv2(silu(conv1(silu(h)) + emb(e)))`. The
//! content block sits before the style block; LoRA adapters attach to the
//! two convolutions of their block.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::lora::{Block, BoundLora, LoraAdapter, LoraSet};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
/// Name of the all-zeros unconditional embedding.
pub const NULL_CONDITION: &str = "null";
/// Generic subject token learned alongside a content adapter.
pub const CONTENT_TOKEN: &str = "content_token";
/// Style-specific token learned alongside a style adapter.
pub const STYLE_TOKEN: &str = "style_token";

/// Weights inside each block that carry adapters.
pub const ADAPTED_WEIGHTS: [&str; 2] = ["conv1", "conv2"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 16,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, IMAGE_CHANNELS]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.height > 64 || self.width > 64 {
            return Err(Error::Config("resolution above 64x64 is not supported".into()));
        }
        if self.embedding_dim == 0 || !self.embedding_dim.is_multiple_of(2) {
            return Err(Error::Config("embedding_dim must be even and positive".into()));
        }
        Ok(())
    }
}

/// Interleaved `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn sinusoidal_timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Named condition vectors. [`NULL_CONDITION`] always resolves to zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl ConditionTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, name: &str, vector: Vec<f64>) -> Result<()> {
        if name == NULL_CONDITION {
            return Err(Error::Invalid("the null condition is reserved".into()));
        }
        if vector.len() != self.dim {
            return Err(shape_err(
                "condition",
                format!("`{name}` has {} values, table dim is {}", vector.len(), self.dim),
            ));
        }
        self.entries.insert(name.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Vec<f64>> {
        if name == NULL_CONDITION {
            return Ok(vec![0.0; self.dim]);
        }
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        name == NULL_CONDITION || self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    /// Copies every entry of `other` in under `prefix/name`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ConditionTable) -> Result<()> {
        for (name, v) in other.iter() {
            self.insert(&format!("{prefix}/{name}"), v.clone())?;
        }
        Ok(())
    }
}

/// An adapter attached for one forward pass at a given strength.
#[derive(Clone, Copy, Debug)]
pub struct Attached<'a> {
    pub adapter: &'a LoraAdapter,
    pub strength: f64,
}

impl<'a> Attached<'a> {
    pub fn full(adapter: &'a LoraAdapter) -> Self {
        Self {
            adapter,
            strength: 1.0,
        }
    }

    pub fn from_set(set: &'a LoraSet) -> Vec<Self> {
        Block::ALL
            .into_iter()
            .filter_map(|b| set.adapter(b).map(Self::full))
            .collect()
    }
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: BTreeMap<String, Var>,
}

impl BoundModel {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl DenoiserModel {
    /// Randomly initialised model; weights `N(0, 1/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in Self::layout(&config) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // conv kernels are [c_out, 9 * c_in]; dense weights are [in, out]
                let fan_in = if name.contains("conv") { shape[1] } else { shape[0] };
                Tensor::randn(&shape, 1.0 / (fan_in as f64).sqrt(), rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named parameters, checking names and shapes.
    pub fn from_parameters(config: ModelConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in Self::layout(&config) {
            let t = params
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(
                    "model",
                    format!("`{name}` is {:?}, expected {:?}", t.shape(), shape),
                ));
            }
            out.insert(name, t);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, params: out })
    }

    fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (c, e) = (cfg.channels, cfg.embedding_dim);
        let mut v = vec![
            ("conv_in.weight".to_string(), vec![c, 9 * IMAGE_CHANNELS]),
            ("conv_in.bias".to_string(), vec![c]),
            ("time_proj.weight".to_string(), vec![e, c]),
            ("time_proj.bias".to_string(), vec![1, c]),
            ("cond_proj.weight".to_string(), vec![e, c]),
            ("conv_out.weight".to_string(), vec![IMAGE_CHANNELS, 9 * c]),
            ("conv_out.bias".to_string(), vec![IMAGE_CHANNELS]),
        ];
        for b in Block::ALL {
            let m = b.module_name();
            v.push((format!("{m}.conv1.weight"), vec![c, 9 * c]));
            v.push((format!("{m}.conv1.bias"), vec![c]));
            v.push((format!("{m}.emb.weight"), vec![c, c]));
            v.push((format!("{m}.emb.bias"), vec![1, c]));
            v.push((format!("{m}.conv2.weight"), vec![c, 9 * c]));
            v.push((format!("{m}.conv2.bias"), vec![c]));
        }
        v
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, d_out, d_in)` of the weights an adapter on any block targets.
    pub fn adapted_weight_dims(&self) -> Vec<(&'static str, usize, usize)> {
        let c = self.config.channels;
        ADAPTED_WEIGHTS.iter().map(|&w| (w, c, 9 * c)).collect()
    }

    pub fn new_adapter<R: Rng + ?Sized>(&self, target: Block, rank: usize, alpha: f64, rng: &mut R) -> Result<LoraAdapter> {
        LoraAdapter::new(target, &self.adapted_weight_dims(), rank, alpha, rng)
    }

    /// All parameters in stable (sorted-name) order.
    pub fn enumerate_parameters(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        BoundModel { vars }
    }

    /// Binds existing tape variables, one per parameter in
    /// [`Self::enumerate_parameters`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(BoundModel {
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Taped forward pass. `cond` is a `[1, embedding_dim]` value.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        t: usize,
        cond: Var,
        loras: &[BoundLora],
    ) -> Result<Var> {
        let [h, w, ch] = self.config.image_shape();
        if tape.value(x).shape() != [h, w, ch] {
            return Err(shape_err(
                "model_forward",
                format!("input {:?}, expected {:?}", tape.value(x).shape(), [h, w, ch]),
            ));
        }
        let temb = sinusoidal_timestep_embedding(t, self.config.embedding_dim)?;
        let temb = tape.constant(Tensor::row(temb));
        let te = tape.matmul(temb, bound.get("time_proj.weight"))?;
        let te = tape.add(te, bound.get("time_proj.bias"))?;
        let ce = tape.matmul(cond, bound.get("cond_proj.weight"))?;
        let e = tape.add(te, ce)?;
        let e = tape.silu(e);

        let ones = tape.constant(Tensor::ones(&[h, w, 1]));
        let mut hid = tape.conv2d(x, bound.get("conv_in.weight"), bound.get("conv_in.bias"))?;
        for block in Block::ALL {
            let m = block.module_name();
            let w1 = self.adapted(tape, bound, block, "conv1", loras)?;
            let w2 = self.adapted(tape, bound, block, "conv2", loras)?;
            let a = tape.silu(hid);
            let r = tape.conv2d(a, w1, bound.get(&format!("{m}.conv1.bias")))?;
            let inj = tape.matmul(e, bound.get(&format!("{m}.emb.weight")))?;
            let inj = tape.add(inj, bound.get(&format!("{m}.emb.bias")))?;
            let inj = tape.matmul(ones, inj)?;
            let r = tape.add(r, inj)?;
            let r = tape.silu(r);
            let r = tape.conv2d(r, w2, bound.get(&format!("{m}.conv2.bias")))?;
            hid = tape.add(hid, r)?;
        }
        let a = tape.silu(hid);
        tape.conv2d(a, bound.get("conv_out.weight"), bound.get("conv_out.bias"))
    }

    fn adapted(&self, tape: &mut Tape, bound: &BoundModel, block: Block, weight: &str, loras: &[BoundLora]) -> Result<Var> {
        let mut w = bound.get(&format!("{}.{weight}.weight", block.module_name()));
        for l in loras.iter().filter(|l| l.target == block) {
            w = l.merged_weight(tape, weight, w)?;
        }
        Ok(w)
    }

    /// Noise prediction for a raw condition vector.
    pub fn predict(&self, zt: &Tensor, t: usize, cond: &[f64], loras: &[Attached<'_>]) -> Result<Tensor> {
        if cond.len() != self.config.embedding_dim {
            return Err(shape_err(
                "model_forward",
                format!("condition has {} values, expected {}", cond.len(), self.config.embedding_dim),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let bl: Vec<BoundLora> = loras
            .iter()
            .map(|a| a.adapter.bind(&mut tape, false, a.strength))
            .collect();
        let x = tape.constant(zt.clone());
        let c = tape.constant(Tensor::row(cond.to_vec()));
        let out = self.forward_taped(&mut tape, &bound, x, t, c, &bl)?;
        Ok(tape.value(out).clone())
    }

    /// Noise prediction for a named condition, optionally with an adapter set.
    pub fn model_forward(
        &self,
        table: &ConditionTable,
        zt: &Tensor,
        t: usize,
        cond: &str,
        loras: Option<&LoraSet>,
    ) -> Result<Tensor> {
        let c = table.get(cond)?;
        let attached = loras.map(Attached::from_set).unwrap_or_default();
        self.predict(zt, t, &c, &attached)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_multi;
    use crate::diffusion::{loss_epsilon, NoiseSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 4,
            width: 4,
            channels: 2,
            embedding_dim: 4,
            seed: 0,
        }
    }

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_timestep_embedding(0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
        assert!(sinusoidal_timestep_embedding(3, 7).is_err());
    }

    #[test]
    fn embedding_bounded_and_distinct() {
        let dim = 16;
        let mut prev = sinusoidal_timestep_embedding(0, dim).unwrap();
        for t in 1..=200 {
            let e = sinusoidal_timestep_embedding(t, dim).unwrap();
            assert!(e.iter().all(|v| v.abs() <= 1.0));
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= (dim as f64).sqrt() + 1e-12);
            assert_ne!(e, prev);
            prev = e;
        }
    }

    #[test]
    fn default_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DenoiserModel::new(ModelConfig::default(), &mut rng).unwrap();
        // conv_in 16*27+16, time/cond proj 2*16*16+16, conv_out 3*144+3,
        // per block 2*(16*144+16) + 16*16+16
        let expect = (16 * 27 + 16) + (2 * 256 + 16) + (3 * 144 + 3) + 2 * (2 * (16 * 144 + 16) + 256 + 16);
        assert_eq!(m.parameter_count(), expect);
        assert!(expect <= 60_000);
        let names: Vec<_> = m.enumerate_parameters().iter().map(|(n, _)| n.to_string()).collect();
        let again: Vec<_> = m.enumerate_parameters().iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, again);
    }

    #[test]
    fn output_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DenoiserModel::new(ModelConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[16, 16, 3], 1.0, &mut rng);
        let y = m.predict(&x, 37, &[0.0; 16], &[]).unwrap();
        assert_eq!(y.shape(), &[16, 16, 3]);
        assert!(y.is_finite());
    }

    #[test]
    fn null_equals_zero_named_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let mut table = ConditionTable::new(4);
        table.insert("zero", vec![0.0; 4]).unwrap();
        table.insert("other", vec![0.5, -0.1, 0.0, 0.2]).unwrap();
        let x = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let a = m.model_forward(&table, &x, 5, NULL_CONDITION, None).unwrap();
        let b = m.model_forward(&table, &x, 5, "zero", None).unwrap();
        let c = m.model_forward(&table, &x, 5, "other", None).unwrap();
        assert!(a.bit_eq(&b));
        assert_ne!(a, c);
        assert!(matches!(
            m.model_forward(&table, &x, 5, "nope", None),
            Err(Error::UnknownCondition(_))
        ));
    }

    #[test]
    fn zero_init_adapters_do_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let ca = m.new_adapter(Block::Content, 2, 2.0, &mut rng).unwrap();
        let sa = m.new_adapter(Block::Style, 2, 2.0, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let cond = [0.3, 0.1, -0.2, 0.0];
        let base = m.predict(&x, 9, &cond, &[]).unwrap();
        let with = m
            .predict(&x, 9, &cond, &[Attached::full(&ca), Attached::full(&sa), Attached { adapter: &ca, strength: 3.0 }])
            .unwrap();
        assert!(base.bit_eq(&with));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DenoiserModel::new(tiny(), &mut rng).unwrap();
        assert!(m.parameter_count() <= 500);
        let s = NoiseSchedule::default_linear();
        let z0 = Tensor::uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let zt = crate::diffusion::forward_noise(&s, &z0, &eps, 60).unwrap();
        let names: Vec<String> = m.enumerate_parameters().iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor> = m.enumerate_parameters().iter().map(|(_, t)| (*t).clone()).collect();
        let err = grad_check_multi(
            |tape, vars| {
                let bound = BoundModel {
                    vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
                };
                let x = tape.constant(zt.clone());
                let c = tape.constant(Tensor::row(vec![0.2, -0.4, 0.1, 0.3]));
                let out = m.forward_taped(tape, &bound, x, 60, c, &[])?;
                let e = tape.constant(eps.clone());
                loss_epsilon(tape, e, out)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
