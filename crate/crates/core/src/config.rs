//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub lambda_cfg: f64,
    pub lambda_cont: f64,
    pub lambda_sty: f64,
    pub content_strength: f64,
    pub style_strength: f64,
    /// DDIM steps from `T` to 0.
    pub sampling_steps: usize,
    pub sample_seed: u64,
    /// Clamp each x0 estimate to `[-1, 1]` while sampling.
    pub clip_x0: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_cfg: 5.0,
            lambda_cont: 0.0,
            lambda_sty: 0.0,
            content_strength: 1.0,
            style_strength: 1.0,
            sampling_steps: 50,
            sample_seed: 0,
            clip_x0: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Pretrained base model. When absent the base is pretrained in-process
    /// from `[model]` and `[train]` settings.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        let g = &self.guidance;
        for (name, v) in [
            ("lambda_cfg", g.lambda_cfg),
            ("lambda_cont", g.lambda_cont),
            ("lambda_sty", g.lambda_sty),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if g.sampling_steps == 0 {
            return Err(Error::Config("sampling_steps must be >= 1".into()));
        }
        Ok(())
    }
}
