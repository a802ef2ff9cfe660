//! Deterministic DDIM sampling with content and style guidance.
//!
//! The guided noise estimate combines six predictions:
//!
//! ```text
//! e = E[cc+ss](c)
//!   + l_cfg  * (E[cc+ss](c)    - E[cc+ss](null))
//!   + l_cont * (E[cc](c_cc)    - E[sc](c_sc))
//!   + l_sty  * (E[ss](c_ss)    - E[cs](c_cs))
//! ```
//!
//! where `cc`/`cs` are the content/style adapters learned from the content
//! image and `sc`/`ss` those learned from the style image. Terms whose
//! weight is zero are skipped together with their forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{mix, predict_z0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSet};
use crate::model::{Attached, ConditionTable, DenoiserModel, NULL_CONDITION};
use crate::tensor::Tensor;

/// Anything that predicts noise from `(z_t, t, condition, adapters)`.
pub trait NoisePredictor {
    fn predict_eps(&self, zt: &Tensor, t: usize, cond: &[f64], loras: &[Attached<'_>]) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserModel {
    fn predict_eps(&self, zt: &Tensor, t: usize, cond: &[f64], loras: &[Attached<'_>]) -> Result<Tensor> {
        self.predict(zt, t, cond, loras)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceParams {
    pub lambda_cfg: f64,
    pub lambda_cont: f64,
    pub lambda_sty: f64,
    /// Strength applied to the content-image content adapter in the joint pass.
    pub content_strength: f64,
    /// Strength applied to the style-image style adapter in the joint pass.
    pub style_strength: f64,
    /// Joint condition `c`.
    pub cond: String,
    /// `c_c^c`: token of the content adapter learned from the content image.
    pub cond_content_of_content: String,
    /// `c_s^c`: token of the content adapter learned from the style image.
    pub cond_content_of_style: String,
    /// `c_s^s`: token of the style adapter learned from the style image.
    pub cond_style_of_style: String,
    /// `c_c^s`: token of the style adapter learned from the content image.
    pub cond_style_of_content: String,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            lambda_cfg: 5.0,
            lambda_cont: 0.0,
            lambda_sty: 0.0,
            content_strength: 1.0,
            style_strength: 1.0,
            cond: NULL_CONDITION.into(),
            cond_content_of_content: NULL_CONDITION.into(),
            cond_content_of_style: NULL_CONDITION.into(),
            cond_style_of_style: NULL_CONDITION.into(),
            cond_style_of_content: NULL_CONDITION.into(),
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self, table: &ConditionTable) -> Result<()> {
        for (name, v) in [
            ("lambda_cfg", self.lambda_cfg),
            ("lambda_cont", self.lambda_cont),
            ("lambda_sty", self.lambda_sty),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for name in [
            &self.cond,
            &self.cond_content_of_content,
            &self.cond_content_of_style,
            &self.cond_style_of_style,
            &self.cond_style_of_content,
        ] {
            if !table.contains(name) {
                return Err(Error::UnknownCondition(name.clone()));
            }
        }
        Ok(())
    }
}

/// The four adapters used by guided sampling. A missing adapter means the
/// corresponding prediction runs on the base weights.
#[derive(Clone, Debug, Default)]
pub struct TransferAdapters {
    pub content_of_content: Option<LoraAdapter>,
    pub style_of_content: Option<LoraAdapter>,
    pub content_of_style: Option<LoraAdapter>,
    pub style_of_style: Option<LoraAdapter>,
}

impl TransferAdapters {
    pub fn from_sets(content_image: &LoraSet, style_image: &LoraSet) -> Self {
        Self {
            content_of_content: content_image.content.clone(),
            style_of_content: content_image.style.clone(),
            content_of_style: style_image.content.clone(),
            style_of_style: style_image.style.clone(),
        }
    }
}

fn one(adapter: &Option<LoraAdapter>, strength: f64) -> Vec<Attached<'_>> {
    adapter.iter().map(|a| Attached { adapter: a, strength }).collect()
}

fn axpy(acc: &mut Tensor, k: f64, a: &Tensor, b: &Tensor) {
    for ((o, x), y) in acc.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o += k * (x - y);
    }
}

/// Combined noise estimate. Runs one forward plus two per nonzero weight.
pub fn guided_epsilon<M: NoisePredictor>(
    model: &M,
    table: &ConditionTable,
    adapters: &TransferAdapters,
    zt: &Tensor,
    t: usize,
    gp: &GuidanceParams,
) -> Result<Tensor> {
    gp.validate(table)?;
    let mut joint = one(&adapters.content_of_content, gp.content_strength);
    joint.extend(one(&adapters.style_of_style, gp.style_strength));

    let cond = table.get(&gp.cond)?;
    let eps_c = model.predict_eps(zt, t, &cond, &joint)?;
    let mut out = eps_c.clone();
    if gp.lambda_cfg != 0.0 {
        let null = table.get(NULL_CONDITION)?;
        let eps_u = model.predict_eps(zt, t, &null, &joint)?;
        axpy(&mut out, gp.lambda_cfg, &eps_c, &eps_u);
    }
    if gp.lambda_cont != 0.0 {
        let a = model.predict_eps(zt, t, &table.get(&gp.cond_content_of_content)?, &one(&adapters.content_of_content, 1.0))?;
        let b = model.predict_eps(zt, t, &table.get(&gp.cond_content_of_style)?, &one(&adapters.content_of_style, 1.0))?;
        axpy(&mut out, gp.lambda_cont, &a, &b);
    }
    if gp.lambda_sty != 0.0 {
        let a = model.predict_eps(zt, t, &table.get(&gp.cond_style_of_style)?, &one(&adapters.style_of_style, 1.0))?;
        let b = model.predict_eps(zt, t, &table.get(&gp.cond_style_of_content)?, &one(&adapters.style_of_content, 1.0))?;
        axpy(&mut out, gp.lambda_sty, &a, &b);
    }
    Ok(out)
}

/// Deterministic DDIM update from `t` to `t_prev` (eta = 0).
pub fn ddim_step(schedule: &NoiseSchedule, zt: &Tensor, eps_pred: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Invalid(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let z0 = predict_z0(schedule, zt, eps_pred, t)?;
    mix(&z0, eps_pred, schedule.alpha_bar(t_prev))
}

/// DDIM update with the clean estimate clamped to `[-1, 1]` and the noise
/// re-derived from the clamped estimate.
pub fn ddim_step_clipped(schedule: &NoiseSchedule, zt: &Tensor, eps_pred: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Invalid(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let z0 = predict_z0(schedule, zt, eps_pred, t)?.map(|v| v.clamp(-1.0, 1.0));
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = zt.zip_map(&z0, "ddim_step", |z, x| (z - sa * x) / sn)?;
    mix(&z0, &eps, schedule.alpha_bar(t_prev))
}

/// Evenly spaced descending timesteps from `start` to 0, both included.
pub fn ddim_timesteps(start: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, start.max(1));
    let mut ts: Vec<usize> = (0..=steps)
        .map(|i| ((start * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Runs DDIM from `z_start` at `t_start` down to 0 using `eps_fn`.
pub fn ddim_trajectory(
    schedule: &NoiseSchedule,
    z_start: Tensor,
    t_start: usize,
    steps: usize,
    eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    ddim_trajectory_with(schedule, z_start, t_start, steps, false, eps_fn)
}

/// As [`ddim_trajectory`]; `clip` selects [`ddim_step_clipped`].
pub fn ddim_trajectory_with(
    schedule: &NoiseSchedule,
    z_start: Tensor,
    t_start: usize,
    steps: usize,
    clip: bool,
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    schedule.check_timestep(t_start)?;
    let ts = ddim_timesteps(t_start, steps);
    let mut z = z_start;
    for w in ts.windows(2) {
        let eps = eps_fn(&z, w[0])?;
        z = if clip {
            ddim_step_clipped(schedule, &z, &eps, w[0], w[1])?
        } else {
            ddim_step(schedule, &z, &eps, w[0], w[1])?
        };
    }
    Ok(z)
}

/// Sampler settings for [`sample`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    /// DDIM steps from `T` to 0.
    pub steps: usize,
    pub seed: u64,
    /// Clamp each x0 estimate to `[-1, 1]`.
    pub clip_x0: bool,
}

/// Full guided sampling from pure noise. Returns an image in `[0, 1]`.
pub fn sample<M: NoisePredictor>(
    model: &M,
    table: &ConditionTable,
    adapters: &TransferAdapters,
    gp: &GuidanceParams,
    schedule: &NoiseSchedule,
    shape: &[usize],
    opts: SampleOptions,
) -> Result<Tensor> {
    if opts.steps == 0 {
        return Err(Error::Invalid("sampling needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let z = Tensor::randn(shape, 1.0, &mut rng);
    let out = ddim_trajectory_with(schedule, z, schedule.timesteps(), opts.steps, opts.clip_x0, |z, t| {
        guided_epsilon(model, table, adapters, z, t, gp)
    })?;
    Ok(crate::data::to_unit(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_noise;
    use crate::lora::Block;
    use crate::model::ModelConfig;
    use std::cell::Cell;

    /// Exact noise predictor for a dataset holding only `target`.
    struct PerfectToy {
        target: Tensor,
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for PerfectToy {
        fn predict_eps(&self, zt: &Tensor, t: usize, _: &[f64], _: &[Attached<'_>]) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(t);
            zt.zip_map(&self.target, "toy", |z, x| (z - ab.sqrt() * x) / (1.0 - ab).sqrt())
        }
    }

    struct Counting<'a> {
        inner: &'a DenoiserModel,
        calls: Cell<usize>,
    }

    impl NoisePredictor for Counting<'_> {
        fn predict_eps(&self, zt: &Tensor, t: usize, cond: &[f64], loras: &[Attached<'_>]) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            self.inner.predict_eps(zt, t, cond, loras)
        }
    }

    fn fixture() -> (DenoiserModel, ConditionTable, TransferAdapters, GuidanceParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            height: 6,
            width: 6,
            channels: 4,
            embedding_dim: 4,
            seed: 0,
        };
        let m = DenoiserModel::new(cfg, &mut rng).unwrap();
        let mut adapter = |b| {
            let mut a = m.new_adapter(b, 2, 2.0, &mut rng).unwrap();
            for p in a.pairs.values_mut() {
                p.b = Tensor::randn(p.b.shape(), 0.3, &mut rng);
            }
            a
        };
        let ad = TransferAdapters {
            content_of_content: Some(adapter(Block::Content)),
            style_of_content: Some(adapter(Block::Style)),
            content_of_style: Some(adapter(Block::Content)),
            style_of_style: Some(adapter(Block::Style)),
        };
        let mut table = ConditionTable::new(4);
        for (i, n) in ["c", "cc", "sc", "ss", "cs"].iter().enumerate() {
            table.insert(n, vec![0.1 * i as f64, -0.2, 0.3, 0.05 * i as f64]).unwrap();
        }
        let gp = GuidanceParams {
            lambda_cfg: 2.0,
            lambda_cont: 1.5,
            lambda_sty: 0.5,
            cond: "c".into(),
            cond_content_of_content: "cc".into(),
            cond_content_of_style: "sc".into(),
            cond_style_of_style: "ss".into(),
            cond_style_of_content: "cs".into(),
            ..Default::default()
        };
        (m, table, ad, gp)
    }

    #[test]
    fn all_weights_zero_is_plain_conditional() {
        let (m, table, ad, mut gp) = fixture();
        gp.lambda_cfg = 0.0;
        gp.lambda_cont = 0.0;
        gp.lambda_sty = 0.0;
        let z = Tensor::randn(&[6, 6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let got = guided_epsilon(&m, &table, &ad, &z, 30, &gp).unwrap();
        let joint = [
            Attached::full(ad.content_of_content.as_ref().unwrap()),
            Attached::full(ad.style_of_style.as_ref().unwrap()),
        ];
        let want = m.predict(&z, 30, &table.get("c").unwrap(), &joint).unwrap();
        assert!(got.bit_eq(&want));
    }

    #[test]
    fn forward_count_follows_nonzero_weights() {
        let (m, table, ad, gp) = fixture();
        let z = Tensor::randn(&[6, 6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        for (cfg, cont, sty, expect) in [
            (2.0, 1.0, 1.0, 6),
            (0.0, 1.0, 1.0, 5),
            (2.0, 0.0, 1.0, 4),
            (2.0, 1.0, 0.0, 4),
            (0.0, 0.0, 0.0, 1),
        ] {
            let counter = Counting {
                inner: &m,
                calls: Cell::new(0),
            };
            let p = GuidanceParams {
                lambda_cfg: cfg,
                lambda_cont: cont,
                lambda_sty: sty,
                ..gp.clone()
            };
            guided_epsilon(&counter, &table, &ad, &z, 50, &p).unwrap();
            assert_eq!(counter.calls.get(), expect);
        }
    }

    #[test]
    fn identical_single_adapter_passes_cancel() {
        let (m, mut table, mut ad, mut gp) = fixture();
        ad.content_of_style = ad.content_of_content.clone();
        ad.style_of_content = ad.style_of_style.clone();
        table.insert("sc", table.get("cc").unwrap()).unwrap();
        table.insert("cs", table.get("ss").unwrap()).unwrap();
        let z = Tensor::randn(&[6, 6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let full = guided_epsilon(&m, &table, &ad, &z, 70, &gp).unwrap();
        gp.lambda_cont = 0.0;
        gp.lambda_sty = 0.0;
        let cfg_only = guided_epsilon(&m, &table, &ad, &z, 70, &gp).unwrap();
        assert!(full.bit_eq(&cfg_only));
    }

    #[test]
    fn affine_in_each_weight() {
        let (m, table, ad, gp) = fixture();
        let z = Tensor::randn(&[6, 6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        type Setter = dyn Fn(&mut GuidanceParams, f64);
        let at = |f: &Setter, v: f64| {
            let mut p = gp.clone();
            f(&mut p, v);
            guided_epsilon(&m, &table, &ad, &z, 90, &p).unwrap()
        };
        let setters: [&Setter; 3] = [
            &|p, v| p.lambda_cfg = v,
            &|p, v| p.lambda_cont = v,
            &|p, v| p.lambda_sty = v,
        ];
        for set in setters {
            let (a, b, c) = (at(set, 0.5), at(set, 1.5), at(set, 2.5));
            for ((x, y), w) in a.data().iter().zip(b.data()).zip(c.data()) {
                assert!(((y - x) - (w - y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let (m, table, ad, gp) = fixture();
        let z = Tensor::zeros(&[6, 6, 3]);
        let bad = GuidanceParams {
            lambda_sty: -1.0,
            ..gp.clone()
        };
        assert!(guided_epsilon(&m, &table, &ad, &z, 10, &bad).is_err());
        let bad = GuidanceParams {
            cond_style_of_content: "missing".into(),
            ..gp.clone()
        };
        assert!(matches!(
            guided_epsilon(&m, &table, &ad, &z, 10, &bad),
            Err(Error::UnknownCondition(_))
        ));
    }

    #[test]
    fn terminal_step_returns_reconstruction() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zt = Tensor::randn(&[3, 3, 3], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 3, 3], 1.0, &mut rng);
        let out = ddim_step(&s, &zt, &eps, 40, 0).unwrap();
        assert!(out.bit_eq(&predict_z0(&s, &zt, &eps, 40).unwrap()));
        assert!(ddim_step(&s, &zt, &eps, 40, 40).is_err());
        assert!(ddim_step(&s, &zt, &eps, 40, 41).is_err());
    }

    #[test]
    fn true_noise_step_lands_on_forward_process() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = Tensor::uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let zt = forward_noise(&s, &z0, &eps, 150).unwrap();
        let next = ddim_step(&s, &zt, &eps, 150, 90).unwrap();
        let want = forward_noise(&s, &z0, &eps, 90).unwrap();
        assert!(next.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn perfect_toy_model_reaches_target() {
        let s = NoiseSchedule::default_linear();
        let toy = PerfectToy {
            target: Tensor::new(vec![1, 1, 1], vec![0.37]).unwrap(),
            schedule: s.clone(),
        };
        let z = Tensor::new(vec![1, 1, 1], vec![-1.3]).unwrap();
        let out = ddim_trajectory(&s, z, 200, 10, |z, t| toy.predict_eps(z, t, &[], &[])).unwrap();
        assert!((out.item() - 0.37).abs() < 1e-6);
    }

    #[test]
    fn timestep_grid() {
        assert_eq!(ddim_timesteps(200, 4), vec![200, 150, 100, 50, 0]);
        assert_eq!(ddim_timesteps(3, 10), vec![3, 2, 1, 0]);
        assert_eq!(ddim_timesteps(100, 1), vec![100, 0]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let (m, table, ad, gp) = fixture();
        let s = NoiseSchedule::default_linear();
        for clip_x0 in [false, true] {
            let opts = SampleOptions { steps: 5, seed: 9, clip_x0 };
            let a = sample(&m, &table, &ad, &gp, &s, &[6, 6, 3], opts).unwrap();
            let b = sample(&m, &table, &ad, &gp, &s, &[6, 6, 3], opts).unwrap();
            assert!(a.bit_eq(&b));
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(sample(&m, &table, &ad, &gp, &s, &[6, 6, 3], SampleOptions { steps: 0, ..opts }).is_err());
        }
    }
}
