//! Command-line interface. Exit status: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::generate_synthetic_pair_sized;
use crate::error::{Error, Result};
use crate::image_io::{png_read, png_write};
use crate::lora::ImageSource;
use crate::metrics::{timestep_loss_profile_with, DEFAULT_BUCKETS};
use crate::model::{Attached, CONTENT_TOKEN, STYLE_TOKEN};
use crate::pipeline::{
    load_lora, load_or_pretrain_base, save_lora, write_profile_csv, write_profile_samples_csv, write_report_csv,
    ImageMetrics, TransferSetup,
};
use crate::train::{base_dataset, pretrain_base, train_content_lora, train_joint_baseline, train_style_lora_two_step, LossScheme};

#[derive(Debug, Parser)]
#[command(name = "stylelab", version, about = "Diffusion + LoRA style-transfer laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Overrides `[train] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[train] total_steps`.
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Overrides `[train] transition_step`.
    #[arg(long)]
    pub transition_step: Option<usize>,
    /// Overrides `[train] style_steps`.
    #[arg(long)]
    pub style_steps: Option<usize>,
    /// Overrides `[train] loss_scheme` (eps_only, x0_only, x0_then_eps, eps_then_x0).
    #[arg(long, value_parser = parse_scheme)]
    pub loss_scheme: Option<LossScheme>,
    /// Writes the per-step training report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> std::result::Result<LossScheme, String> {
    LossScheme::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown loss scheme `{s}`"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes content.png and style.png for a seed.
    GenData {
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// Image side length.
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// Pretrains the base denoiser and saves it.
    TrainBase {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learns a content adapter from one image.
    TrainContent {
        config: PathBuf,
        image: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Two-step training: content adapter, then a style adapter against it.
    TrainStyle {
        config: PathBuf,
        image: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Marks the adapters as learned from a content image.
        #[arg(long)]
        content_image: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Joint training of both adapters (ablation baseline).
    TrainJoint {
        config: PathBuf,
        image: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Marks the adapters as learned from a style image.
        #[arg(long)]
        style_image: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Guided sampling with adapters from a content and a style image.
    Transfer {
        config: PathBuf,
        #[arg(long)]
        content_lora: PathBuf,
        #[arg(long)]
        style_lora: PathBuf,
        #[arg(long)]
        lambda_cfg: Option<f64>,
        #[arg(long)]
        lambda_cont: Option<f64>,
        #[arg(long)]
        lambda_sty: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Clamp x0 estimates while sampling (overrides `[guidance] clip_x0`).
        #[arg(long)]
        clip_x0: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Per-timestep-bucket loss profile of a base or adapter checkpoint.
    AnalyzeLoss {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        evals_per_bucket: usize,
        #[arg(long, default_value_t = DEFAULT_BUCKETS)]
        buckets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also writes every individual draw here.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Proxy metrics between two PNGs, as CSV.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn apply(cfg: &mut ExperimentConfig, o: &TrainOverrides) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.total_steps {
        t.total_steps = v;
    }
    if let Some(v) = o.transition_step {
        t.transition_step = v;
    }
    if let Some(v) = o.style_steps {
        t.style_steps = v;
    }
    if let Some(v) = o.loss_scheme {
        t.loss_scheme = v;
    }
    cfg.validate()
}

#[derive(Clone, Copy, Debug)]
enum Protocol {
    Content,
    TwoStep(ImageSource),
    Joint(ImageSource),
}

fn train_cmd(
    config: &Path,
    image: &Path,
    out: &Path,
    o: &TrainOverrides,
    which: Protocol,
) -> Result<String> {
    let mut cfg = load_config(config)?;
    apply(&mut cfg, o)?;
    let img = png_read(image)?;
    let (model, schedule) = load_or_pretrain_base(&cfg)?;
    let trained = match which {
        Protocol::Content => train_content_lora(&model, &schedule, &img, ImageSource::ContentImage, &cfg.train)?,
        Protocol::TwoStep(source) => {
            let r = train_style_lora_two_step(&model, &schedule, &img, source, &cfg.train)?;
            if r.content_after_phase_a != r.content_after_phase_b {
                return Err(Error::Lora("content adapter changed while frozen".into()));
            }
            r.trained
        }
        Protocol::Joint(source) => train_joint_baseline(&model, &schedule, &img, source, &cfg.train)?,
    };
    save_lora(out, &cfg, &trained)?;
    if let Some(p) = &o.report {
        write_report_csv(p, &trained.report)?;
    }
    let last = trained.report.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "{} steps, final loss {last:.4e}, fingerprints {:?}",
        trained.report.records.len(),
        trained.report.fingerprints
    ))
}

/// Runs one command; messages go to stderr.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, out, size } => {
            if size < 4 {
                return Err(Error::Invalid("size must be at least 4".into()));
            }
            std::fs::create_dir_all(&out)?;
            let (c, s) = generate_synthetic_pair_sized(seed, size);
            png_write(&out.join("content.png"), &c)?;
            png_write(&out.join("style.png"), &s)?;
            eprintln!("wrote {}/content.png and style.png", out.display());
        }
        Command::TrainBase { config, out, report } => {
            let cfg = load_config(&config)?;
            let schedule = cfg.schedule.build()?;
            let (model, rep) = pretrain_base(cfg.model.clone(), &schedule, &cfg.train)?;
            Checkpoint::from_model(&model, schedule.timesteps()).save(&out)?;
            if let Some(p) = report {
                write_report_csv(&p, &rep)?;
            }
            eprintln!("base: {} steps in {:.1?}", rep.records.len(), rep.wall_time);
        }
        Command::TrainContent {
            config,
            image,
            out,
            overrides,
        } => eprintln!("{}", train_cmd(&config, &image, &out, &overrides, Protocol::Content)?),
        Command::TrainStyle {
            config,
            image,
            out,
            content_image,
            overrides,
        } => {
            let source = if content_image {
                ImageSource::ContentImage
            } else {
                ImageSource::StyleImage
            };
            eprintln!("{}", train_cmd(&config, &image, &out, &overrides, Protocol::TwoStep(source))?)
        }
        Command::TrainJoint {
            config,
            image,
            out,
            style_image,
            overrides,
        } => {
            let source = if style_image {
                ImageSource::StyleImage
            } else {
                ImageSource::ContentImage
            };
            eprintln!("{}", train_cmd(&config, &image, &out, &overrides, Protocol::Joint(source))?)
        }
        Command::Transfer {
            config,
            content_lora,
            style_lora,
            lambda_cfg,
            lambda_cont,
            lambda_sty,
            steps,
            seed,
            clip_x0,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            let g = &mut cfg.guidance;
            g.lambda_cfg = lambda_cfg.unwrap_or(g.lambda_cfg);
            g.lambda_cont = lambda_cont.unwrap_or(g.lambda_cont);
            g.lambda_sty = lambda_sty.unwrap_or(g.lambda_sty);
            g.sampling_steps = steps.unwrap_or(g.sampling_steps);
            g.sample_seed = seed.unwrap_or(g.sample_seed);
            g.clip_x0 |= clip_x0;
            cfg.validate()?;
            let c = load_lora(&content_lora, &cfg)?;
            let s = load_lora(&style_lora, &cfg)?;
            let (model, schedule) = load_or_pretrain_base(&cfg)?;
            let setup = TransferSetup::new((&c.0, &c.1), (&s.0, &s.1), &cfg)?;
            let img = setup.run(&model, &schedule, &cfg)?;
            png_write(&out, &img)?;
            eprintln!("wrote {}", out.display());
        }
        Command::AnalyzeLoss {
            config,
            checkpoint,
            out,
            evals_per_bucket,
            buckets,
            seed,
            samples,
        } => {
            let cfg = load_config(&config)?;
            let schedule = cfg.schedule.build()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            ckpt.header.check_matches(&cfg.model, schedule.timesteps())?;
            let is_model = ckpt.entries.iter().any(|(n, _)| n.starts_with("model."));
            let data = base_dataset(&cfg.model, &cfg.train)?;
            let profile = if is_model {
                let model = ckpt.to_model(cfg.model.seed)?;
                timestep_loss_profile_with(&model, &[], None, &data, &schedule, buckets, evals_per_bucket, seed)?
            } else {
                let (set, table) = ckpt.to_lora()?;
                let (model, _) = load_or_pretrain_base(&cfg)?;
                let attached = Attached::from_set(&set);
                let mut cond = vec![0.0; cfg.model.embedding_dim];
                for name in [CONTENT_TOKEN, STYLE_TOKEN] {
                    if table.contains(name) {
                        for (c, v) in cond.iter_mut().zip(table.get(name)?) {
                            *c += v;
                        }
                    }
                }
                timestep_loss_profile_with(&model, &attached, Some(&cond), &data, &schedule, buckets, evals_per_bucket, seed)?
            };
            write_profile_csv(&profile, &schedule, BufWriter::new(File::create(&out)?))?;
            if let Some(p) = samples {
                write_profile_samples_csv(&profile, BufWriter::new(File::create(p)?))?;
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Metrics { a, b, out } => {
            let m = ImageMetrics::compute(&png_read(&a)?, &png_read(&b)?)?;
            match out {
                Some(p) => m.write_csv(BufWriter::new(File::create(p)?))?,
                None => m.write_csv(std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
