//! Glue between checkpoints, configuration and the training/sampling code.

use std::io::Write;

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::ExperimentConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::guidance::{sample, GuidanceParams, SampleOptions, TransferAdapters};
use crate::lora::{ImageSource, LoraSet};
use crate::metrics::{content_mse, gram_style_distance, pixel_mse, LossProfile};
use crate::model::{ConditionTable, DenoiserModel, CONTENT_TOKEN, NULL_CONDITION, STYLE_TOKEN};
use crate::tensor::Tensor;
use crate::train::{pretrain_base, TrainReport, TrainedLora};

/// Condition-name prefix for vectors learned on the content image.
pub const CONTENT_PREFIX: &str = "content_image";
/// Condition-name prefix for vectors learned on the style image.
pub const STYLE_PREFIX: &str = "style_image";
/// Joint condition: content token of the content image plus style token of
/// the style image.
pub const COMBINED: &str = "combined";

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// Loads the base checkpoint named in `[paths]`, or pretrains one.
pub fn load_or_pretrain_base(cfg: &ExperimentConfig) -> Result<(DenoiserModel, NoiseSchedule)> {
    let schedule = cfg.schedule.build()?;
    let model = match &cfg.paths.base_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.header.check_matches(&cfg.model, schedule.timesteps())?;
            ckpt.to_model(cfg.model.seed)?
        }
        None => pretrain_base(cfg.model.clone(), &schedule, &cfg.train)?.0,
    };
    Ok((model, schedule))
}

pub fn header(cfg: &ExperimentConfig) -> CheckpointHeader {
    CheckpointHeader::new(&cfg.model, cfg.schedule.timesteps)
}

pub fn save_lora(path: &std::path::Path, cfg: &ExperimentConfig, trained: &TrainedLora) -> Result<()> {
    Checkpoint::from_lora(header(cfg), &trained.set, &trained.conditions).save(path)
}

pub fn load_lora(path: &std::path::Path, cfg: &ExperimentConfig) -> Result<(LoraSet, ConditionTable)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.header.check_matches(&cfg.model, cfg.schedule.timesteps)?;
    if ckpt.entries.iter().any(|(n, _)| n.starts_with("model.")) {
        return Err(Error::Checkpoint(format!("{} holds model weights, not adapters", path.display())));
    }
    ckpt.to_lora()
}

/// Everything a guided transfer needs.
#[derive(Clone, Debug)]
pub struct TransferSetup {
    pub adapters: TransferAdapters,
    pub table: ConditionTable,
    pub params: GuidanceParams,
}

fn prefixed_or_null(table: &ConditionTable, prefix: &str, name: &str) -> String {
    let full = format!("{prefix}/{name}");
    if table.contains(&full) {
        full
    } else {
        NULL_CONDITION.to_string()
    }
}

impl TransferSetup {
    /// Combines adapter sets learned on the content and the style image.
    /// Missing adapters run on base weights with the null condition.
    pub fn new(
        content: (&LoraSet, &ConditionTable),
        style: (&LoraSet, &ConditionTable),
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        if content.0.source != ImageSource::ContentImage || style.0.source != ImageSource::StyleImage {
            return Err(Error::Lora(
                "transfer needs a content-image adapter set first and a style-image set second".into(),
            ));
        }
        let dim = cfg.model.embedding_dim;
        let mut table = ConditionTable::new(dim);
        table.merge_prefixed(CONTENT_PREFIX, content.1)?;
        table.merge_prefixed(STYLE_PREFIX, style.1)?;
        let cc = prefixed_or_null(&table, CONTENT_PREFIX, CONTENT_TOKEN);
        let ss = prefixed_or_null(&table, STYLE_PREFIX, STYLE_TOKEN);
        let combined: Vec<f64> = table
            .get(&cc)?
            .iter()
            .zip(table.get(&ss)?)
            .map(|(a, b)| a + b)
            .collect();
        table.insert(COMBINED, combined)?;
        let g = &cfg.guidance;
        let params = GuidanceParams {
            lambda_cfg: g.lambda_cfg,
            lambda_cont: g.lambda_cont,
            lambda_sty: g.lambda_sty,
            content_strength: g.content_strength,
            style_strength: g.style_strength,
            cond: COMBINED.into(),
            cond_content_of_content: cc,
            cond_content_of_style: prefixed_or_null(&table, STYLE_PREFIX, CONTENT_TOKEN),
            cond_style_of_style: ss,
            cond_style_of_content: prefixed_or_null(&table, CONTENT_PREFIX, STYLE_TOKEN),
        };
        params.validate(&table)?;
        Ok(Self {
            adapters: TransferAdapters::from_sets(content.0, style.0),
            table,
            params,
        })
    }

    /// Guided sample in `[0, 1]` using the `[guidance]` steps and seed.
    pub fn run(&self, model: &DenoiserModel, schedule: &NoiseSchedule, cfg: &ExperimentConfig) -> Result<Tensor> {
        sample(
            model,
            &self.table,
            &self.adapters,
            &self.params,
            schedule,
            &cfg.model.image_shape(),
            SampleOptions {
                steps: cfg.guidance.sampling_steps,
                seed: cfg.guidance.sample_seed,
                clip_x0: cfg.guidance.clip_x0,
            },
        )
    }
}

/// Per-bucket means as CSV.
pub fn write_profile_csv<W: Write>(profile: &LossProfile, schedule: &NoiseSchedule, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record([
        "bucket",
        "t_lo",
        "t_hi",
        "count",
        "mean_loss_eps",
        "mean_loss_x0_direct",
        "mean_loss_z0hat",
        "mean_scaling_factor",
    ])?;
    for (i, b) in profile.buckets.iter().enumerate() {
        let k = (b.t_lo..=b.t_hi).map(|t| schedule.z0hat_loss_factor(t)).sum::<f64>() / (b.t_hi - b.t_lo + 1) as f64;
        out.write_record([
            (i + 1).to_string(),
            b.t_lo.to_string(),
            b.t_hi.to_string(),
            b.count.to_string(),
            format!("{:e}", b.mean_eps),
            format!("{:e}", b.mean_x0_direct),
            format!("{:e}", b.mean_z0hat),
            format!("{k:e}"),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Every profile draw as CSV.
pub fn write_profile_samples_csv<W: Write>(profile: &LossProfile, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["bucket", "t", "image", "loss_eps", "loss_x0_direct", "loss_z0hat"])?;
    for s in &profile.samples {
        out.write_record([
            (s.bucket + 1).to_string(),
            s.t.to_string(),
            s.image.to_string(),
            format!("{:e}", s.loss_eps),
            format!("{:e}", s.loss_x0_direct),
            format!("{:e}", s.loss_z0hat),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub gram_style_distance: f64,
    pub content_mse: f64,
    pub pixel_mse: f64,
}

impl ImageMetrics {
    pub fn compute(a: &Tensor, b: &Tensor) -> Result<Self> {
        Ok(Self {
            gram_style_distance: gram_style_distance(a, b)?,
            content_mse: content_mse(a, b)?,
            pixel_mse: pixel_mse(a, b)?,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["gram_style_distance", "content_mse", "pixel_mse"])?;
        out.write_record([
            format!("{:e}", self.gram_style_distance),
            format!("{:e}", self.content_mse),
            format!("{:e}", self.pixel_mse),
        ])?;
        out.flush()?;
        Ok(())
    }
}

pub fn write_report_csv(path: &std::path::Path, report: &TrainReport) -> Result<()> {
    let f = std::fs::File::create(path)?;
    report.write_csv(std::io::BufWriter::new(f))
}
