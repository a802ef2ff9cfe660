//! Training protocols: base pretraining, content adapters with a stepwise
//! loss transition, two-step style adapters and the joint baseline.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{synthetic_dataset, to_signed, to_unit};
use crate::diffusion::{forward_noise, loss_epsilon, loss_z0hat, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::ddim_trajectory;
use crate::lora::{Block, BoundLora, ImageSource, LoraSet};
use crate::metrics::pixel_mse;
use crate::model::{Attached, ConditionTable, DenoiserModel, ModelConfig, CONTENT_TOKEN, STYLE_TOKEN};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Noise-prediction MSE.
    Epsilon,
    /// MSE between the image and its reconstruction from the predicted noise.
    Z0Hat,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Epsilon => "eps",
            LossKind::Z0Hat => "x0",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScheme {
    EpsOnly,
    X0Only,
    X0ThenEps,
    EpsThenX0,
}

impl LossScheme {
    pub const ALL: [LossScheme; 4] = [
        LossScheme::EpsOnly,
        LossScheme::X0Only,
        LossScheme::X0ThenEps,
        LossScheme::EpsThenX0,
    ];

    /// Loss used at `step` (0-based) with transition step `n`.
    pub fn kind_at(self, step: usize, n: usize) -> LossKind {
        match self {
            LossScheme::EpsOnly => LossKind::Epsilon,
            LossScheme::X0Only => LossKind::Z0Hat,
            LossScheme::EpsThenX0 if step < n => LossKind::Epsilon,
            LossScheme::EpsThenX0 => LossKind::Z0Hat,
            LossScheme::X0ThenEps if step < n => LossKind::Z0Hat,
            LossScheme::X0ThenEps => LossKind::Epsilon,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossScheme::EpsOnly => "eps_only",
            LossScheme::X0Only => "x0_only",
            LossScheme::X0ThenEps => "x0_then_eps",
            LossScheme::EpsThenX0 => "eps_then_x0",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// `t` uniform over `1..=T`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub transition_step: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Steps of the style phase of two-step training.
    pub style_steps: usize,
    pub lr_style: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_scheme: LossScheme,
    pub timestep_sampling: TimestepSampling,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub rank: usize,
    pub alpha: f64,
    pub base_steps: usize,
    pub base_lr: f64,
    pub base_dataset_size: usize,
    /// DDIM steps used when measuring reconstruction error from `T / 2`.
    pub recon_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 600,
            transition_step: 200,
            lr_phase1: 2e-4,
            lr_phase2: 1e-4,
            style_steps: 400,
            lr_style: 1e-4,
            batch_size: 1,
            seed: 0,
            loss_scheme: LossScheme::EpsThenX0,
            timestep_sampling: TimestepSampling::Uniform,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            grad_clip: 0.0,
            rank: 4,
            alpha: 4.0,
            base_steps: 2000,
            base_lr: 2e-3,
            base_dataset_size: 64,
            recon_steps: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.transition_step > self.total_steps {
            return bad(format!(
                "transition_step {} exceeds total_steps {}",
                self.transition_step, self.total_steps
            ));
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        for (name, v) in [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase2", self.lr_phase2),
            ("lr_style", self.lr_style),
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("grad_clip", self.grad_clip),
            ("alpha", self.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if self.base_dataset_size == 0 {
            return bad("base_dataset_size must be >= 1".into());
        }
        if self.recon_steps == 0 {
            return bad("recon_steps must be >= 1".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.momentum)
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.transition_step {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub loss: f64,
    pub kind: LossKind,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub fingerprints: BTreeMap<String, String>,
    pub wall_time: Duration,
}

impl TrainReport {
    /// Step indices where the active loss differs from the previous step.
    pub fn flips(&self) -> Vec<usize> {
        self.records
            .windows(2)
            .filter(|w| w[0].kind != w[1].kind)
            .map(|w| w[1].step)
            .collect()
    }

    /// Writes `step,t,loss,scheme` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["step", "t", "loss", "scheme"])?;
        for r in &self.records {
            out.write_record([r.step.to_string(), r.t.to_string(), format!("{:e}", r.loss), r.kind.as_str().into()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Adapters plus the condition vectors they were trained with.
#[derive(Clone, Debug)]
pub struct TrainedLora {
    pub set: LoraSet,
    pub conditions: ConditionTable,
    pub report: TrainReport,
}

/// Content fingerprint at the end of phase A and at the end of phase B.
#[derive(Clone, Debug)]
pub struct TwoStepOutcome {
    pub trained: TrainedLora,
    pub content_after_phase_a: String,
    pub content_after_phase_b: String,
}

fn check_image(model: &DenoiserModel, image: &Tensor) -> Result<()> {
    let want = model.config().image_shape();
    if image.shape() != want {
        return Err(Error::Invalid(format!("image is {:?}, model expects {:?}", image.shape(), want)));
    }
    if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("image values must lie in [0, 1]".into()));
    }
    Ok(())
}

fn global_clip(grads: &mut [(String, Tensor)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.map(|v| v * k);
        }
    }
}

fn taken(grads: &mut Gradients, v: Var, like: &Tensor) -> Tensor {
    grads.take(v).unwrap_or_else(|| Tensor::zeros(like.shape()))
}

fn sample_t<R: Rng + ?Sized>(rule: TimestepSampling, schedule: &NoiseSchedule, rng: &mut R) -> usize {
    match rule {
        TimestepSampling::Uniform => rng.random_range(1..=schedule.timesteps()),
    }
}

/// One single-image adapter training phase.
struct Phase<'a> {
    steps: usize,
    blocks: &'a [Block],
    /// Conditions summed into the model input.
    input_conds: &'a [&'a str],
    /// Subset of `input_conds` that receives gradient.
    trained_conds: &'a [&'a str],
    kind: &'a dyn Fn(usize) -> LossKind,
    lr: &'a dyn Fn(usize) -> f64,
}

#[allow(clippy::too_many_arguments)]
fn run_phase<R: Rng + ?Sized>(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    set: &mut LoraSet,
    table: &mut ConditionTable,
    phase: &Phase<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<StepRecord>> {
    let mut opt = cfg.optimizer();
    let mut records = Vec::with_capacity(phase.steps);
    for step in 0..phase.steps {
        let t = sample_t(cfg.timestep_sampling, schedule, rng);
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        let zt = forward_noise(schedule, z0, &eps, t)?;
        let kind = (phase.kind)(step);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let mut loras: Vec<BoundLora> = Vec::new();
        for b in Block::ALL {
            if let Some(a) = set.adapter(b) {
                let train = phase.blocks.contains(&b) && !set.is_frozen(b);
                loras.push(a.bind(&mut tape, train, 1.0));
            }
        }
        let mut cond_vars = Vec::new();
        let mut cond = None;
        for name in phase.input_conds {
            let v = tape.leaf(Tensor::row(table.get(name)?), phase.trained_conds.contains(name));
            cond_vars.push((*name, v));
            cond = Some(match cond {
                None => v,
                Some(c) => tape.add(c, v)?,
            });
        }
        let cond = match cond {
            Some(c) => c,
            None => tape.constant(Tensor::zeros(&[1, model.config().embedding_dim])),
        };
        let x = tape.constant(zt.clone());
        let pred = model.forward_taped(&mut tape, &bound, x, t, cond, &loras)?;
        let loss = match kind {
            LossKind::Epsilon => {
                let e = tape.constant(eps);
                loss_epsilon(&mut tape, e, pred)?
            }
            LossKind::Z0Hat => {
                let z = tape.constant(z0.clone());
                loss_z0hat(&mut tape, schedule, z, x, pred, t)?
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = tape.backward(loss)?;

        let mut updates: Vec<(String, Tensor)> = Vec::new();
        for bl in &loras {
            if !phase.blocks.contains(&bl.target) || set.is_frozen(bl.target) {
                continue;
            }
            let adapter = set.adapter(bl.target).expect("bound adapter exists");
            for (name, v) in bl.vars() {
                let like = adapter.parameters().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone());
                let like = like.expect("bound parameter exists");
                updates.push((format!("{}.{name}", bl.target.key()), taken(&mut grads, v, &like)));
            }
        }
        for (name, v) in &cond_vars {
            if phase.trained_conds.contains(name) {
                let like = Tensor::zeros(&[1, table.dim()]);
                updates.push((format!("cond.{name}"), taken(&mut grads, *v, &like)));
            }
        }
        global_clip(&mut updates, cfg.grad_clip);

        let lr = (phase.lr)(step);
        opt.begin_step();
        for (key, g) in updates {
            if let Some(name) = key.strip_prefix("cond.") {
                let vec = table.get_mut(name).expect("trained condition exists");
                let mut p = Tensor::row(std::mem::take(vec));
                opt.update(&key, &mut p, &g, lr);
                *vec = p.into_data();
            } else {
                let (block, name) = key.split_once('.').expect("key is block.param");
                let b = if block == Block::Content.key() { Block::Content } else { Block::Style };
                let p = set
                    .adapter_mut(b)
                    .and_then(|a| a.parameter_mut(name))
                    .expect("trained adapter parameter exists");
                opt.update(&key, p, &g, lr);
            }
        }
        records.push(StepRecord {
            step,
            t,
            loss: value,
            kind,
        });
    }
    Ok(records)
}

fn fresh_table(model: &DenoiserModel, names: &[&str]) -> Result<ConditionTable> {
    let dim = model.config().embedding_dim;
    let mut table = ConditionTable::new(dim);
    for n in names {
        table.insert(n, vec![0.0; dim])?;
    }
    Ok(table)
}

/// Learns a content-block adapter and `content_token` from one image with
/// the configured loss schedule.
pub fn train_content_lora(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    image: &Tensor,
    source: ImageSource,
    cfg: &TrainConfig,
) -> Result<TrainedLora> {
    cfg.validate()?;
    check_image(model, image)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = LoraSet::new(source);
    set.set_adapter(model.new_adapter(Block::Content, cfg.rank, cfg.alpha, &mut rng)?);
    let mut table = fresh_table(model, &[CONTENT_TOKEN])?;
    let z0 = to_signed(image);
    let kind = |s| cfg.loss_scheme.kind_at(s, cfg.transition_step);
    let lr = |s| cfg.lr_at(s);
    let phase = Phase {
        steps: cfg.total_steps,
        blocks: &[Block::Content],
        input_conds: &[CONTENT_TOKEN],
        trained_conds: &[CONTENT_TOKEN],
        kind: &kind,
        lr: &lr,
    };
    let records = run_phase(model, schedule, &z0, &mut set, &mut table, &phase, cfg, &mut rng)?;
    Ok(TrainedLora {
        report: TrainReport {
            records,
            fingerprints: set.fingerprints(),
            wall_time: start.elapsed(),
        },
        set,
        conditions: table,
    })
}

/// Phase A learns a content adapter on the image; phase B freezes it and
/// learns a fresh style-block adapter with the reconstruction loss only.
pub fn train_style_lora_two_step(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    image: &Tensor,
    source: ImageSource,
    cfg: &TrainConfig,
) -> Result<TwoStepOutcome> {
    let start = Instant::now();
    let TrainedLora {
        mut set,
        mut conditions,
        report,
    } = train_content_lora(model, schedule, image, source, cfg)?;
    set.freeze(Block::Content)?;
    let content_after_phase_a = set.adapter(Block::Content).expect("phase A adapter").fingerprint();

    // phase B draws from a separate stream of the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    set.set_adapter(model.new_adapter(Block::Style, cfg.rank, cfg.alpha, &mut rng)?);
    conditions.insert(STYLE_TOKEN, vec![0.0; conditions.dim()])?;
    let z0 = to_signed(image);
    let kind = |_| LossKind::Z0Hat;
    let lr = |_| cfg.lr_style;
    let phase = Phase {
        steps: cfg.style_steps,
        blocks: &[Block::Style],
        input_conds: &[STYLE_TOKEN],
        trained_conds: &[STYLE_TOKEN],
        kind: &kind,
        lr: &lr,
    };
    let phase_b = run_phase(model, schedule, &z0, &mut set, &mut conditions, &phase, cfg, &mut rng)?;
    let content_after_phase_b = set.adapter(Block::Content).expect("phase A adapter").fingerprint();

    let offset = report.records.len();
    let mut records = report.records;
    records.extend(phase_b.into_iter().map(|r| StepRecord {
        step: r.step + offset,
        ..r
    }));
    Ok(TwoStepOutcome {
        trained: TrainedLora {
            report: TrainReport {
                records,
                fingerprints: set.fingerprints(),
                wall_time: start.elapsed(),
            },
            set,
            conditions,
        },
        content_after_phase_a,
        content_after_phase_b,
    })
}

/// Both adapters and both tokens trained together under one loss schedule.
pub fn train_joint_baseline(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    image: &Tensor,
    source: ImageSource,
    cfg: &TrainConfig,
) -> Result<TrainedLora> {
    cfg.validate()?;
    check_image(model, image)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = LoraSet::new(source);
    for b in Block::ALL {
        set.set_adapter(model.new_adapter(b, cfg.rank, cfg.alpha, &mut rng)?);
    }
    let mut table = fresh_table(model, &[CONTENT_TOKEN, STYLE_TOKEN])?;
    let z0 = to_signed(image);
    let kind = |s| cfg.loss_scheme.kind_at(s, cfg.transition_step);
    let lr = |s| cfg.lr_at(s);
    let phase = Phase {
        steps: cfg.total_steps,
        blocks: &Block::ALL,
        input_conds: &[CONTENT_TOKEN, STYLE_TOKEN],
        trained_conds: &[CONTENT_TOKEN, STYLE_TOKEN],
        kind: &kind,
        lr: &lr,
    };
    let records = run_phase(model, schedule, &z0, &mut set, &mut table, &phase, cfg, &mut rng)?;
    Ok(TrainedLora {
        report: TrainReport {
            records,
            fingerprints: set.fingerprints(),
            wall_time: start.elapsed(),
        },
        set,
        conditions: table,
    })
}

/// Offset added to the model seed when drawing the base training images, so
/// the base never sees the low-seed pairs used as transfer fixtures.
pub const BASE_DATA_SEED_OFFSET: u64 = 1_000_000;

/// The `[-1, 1]` images the base denoiser is pretrained on.
pub fn base_dataset(config: &ModelConfig, cfg: &TrainConfig) -> Result<Vec<Tensor>> {
    if config.width != config.height {
        return Err(Error::Invalid("base pretraining needs square images".into()));
    }
    let seed = config.seed.wrapping_add(BASE_DATA_SEED_OFFSET);
    Ok(synthetic_dataset(cfg.base_dataset_size, config.height, seed)
        .iter()
        .map(to_signed)
        .collect())
}

/// Trains a randomly initialised denoiser with the noise-prediction loss on
/// a synthetic image set, null condition, Adam.
pub fn pretrain_base(config: ModelConfig, schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<(DenoiserModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DenoiserModel::new(config.clone(), &mut rng)?;
    let data = base_dataset(&config, cfg)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
    let mut records = Vec::with_capacity(cfg.base_steps);
    for step in 0..cfg.base_steps {
        let z0 = &data[rng.random_range(0..data.len())];
        let t = sample_t(cfg.timestep_sampling, schedule, &mut rng);
        let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let zt = forward_noise(schedule, z0, &eps, t)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(zt);
        let cond = tape.constant(Tensor::zeros(&[1, config.embedding_dim]));
        let pred = model.forward_taped(&mut tape, &bound, x, t, cond, &[])?;
        let e = tape.constant(eps);
        let loss = loss_epsilon(&mut tape, e, pred)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = tape.backward(loss)?;
        let mut updates: Vec<(String, Tensor)> = bound
            .vars()
            .iter()
            .map(|(n, v)| (n.clone(), grads.take(*v).expect("model parameter gradient")))
            .collect();
        global_clip(&mut updates, cfg.grad_clip);
        opt.begin_step();
        for (name, g) in updates {
            let p = model.parameter_mut(&name).expect("bound parameter exists");
            opt.update(&name, p, &g, cfg.base_lr);
        }
        records.push(StepRecord {
            step,
            t,
            loss: value,
            kind: LossKind::Epsilon,
        });
    }
    let report = TrainReport {
        records,
        fingerprints: BTreeMap::new(),
        wall_time: start.elapsed(),
    };
    Ok((model, report))
}

/// Noises `image` (in `[0, 1]`) to `T / 2` with seeded noise, runs DDIM back
/// to 0 and returns the pixel MSE on the `[0, 1]` scale.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_mse(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    loras: &[Attached<'_>],
    cond: &[f64],
    image: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    check_image(model, image)?;
    let t_start = (schedule.timesteps() / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(image.shape(), 1.0, &mut rng);
    let zt = forward_noise(schedule, &to_signed(image), &eps, t_start)?;
    let out = ddim_trajectory(schedule, zt, t_start, steps, |z, t| model.predict(z, t, cond, loras))?;
    pixel_mse(&to_unit(&out), image)
}

/// Reconstruction error of a trained content adapter with its own token.
pub fn content_reconstruction_mse(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    trained: &TrainedLora,
    image: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let attached: Vec<Attached<'_>> = trained.set.content.iter().map(Attached::full).collect();
    let cond = trained.conditions.get(CONTENT_TOKEN)?;
    reconstruction_mse(model, schedule, &attached, &cond, image, steps, seed)
}
