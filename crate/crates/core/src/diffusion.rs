//! Variance schedule, forward noising and the three training losses.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
/// Chosen so that `alpha_bar(T) < 0.05` at `T = 200`.
pub const DEFAULT_BETA_END: f64 = 0.04;

/// Betas `b_1..b_T` and cumulative products `alpha_bar_0..alpha_bar_T`
/// with `alpha_bar_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidSchedule("timestep count must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta list".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `(1 - alpha_bar_t) / alpha_bar_t`, the factor relating the
    /// reconstructed-signal loss to the noise loss.
    pub fn z0hat_loss_factor(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        (1.0 - ab) / ab
    }
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`.
pub fn mix(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (s0, s1) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, "forward_noise", |z, e| s0 * z + s1 * e)
}

pub fn forward_noise(schedule: &NoiseSchedule, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    mix(z0, eps, schedule.alpha_bar(t))
}

/// Inverts the forward process given a noise estimate:
/// `(zt - sqrt(1 - ab) * eps_pred) / sqrt(ab)`.
pub fn predict_z0(schedule: &NoiseSchedule, zt: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let (s1, inv0) = ((1.0 - ab).sqrt(), 1.0 / ab.sqrt());
    zt.zip_map(eps_pred, "predict_z0", |z, e| (z - e * s1) * inv0)
}

/// Taped form of [`predict_z0`]; gradients flow into `eps_pred`.
pub fn predict_z0_taped(tape: &mut Tape, schedule: &NoiseSchedule, zt: Var, eps_pred: Var, t: usize) -> Result<Var> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let scaled = tape.scale(eps_pred, (1.0 - ab).sqrt());
    let diff = tape.sub(zt, scaled)?;
    Ok(tape.scale(diff, 1.0 / ab.sqrt()))
}

/// Mean squared error between true and predicted noise.
pub fn loss_epsilon(tape: &mut Tape, eps: Var, eps_pred: Var) -> Result<Var> {
    tape.mse(eps, eps_pred)
}

/// Mean squared error between the clean signal and a direct prediction of it.
pub fn loss_x0_direct(tape: &mut Tape, z0: Var, z0_pred: Var) -> Result<Var> {
    tape.mse(z0, z0_pred)
}

/// Reconstructs the clean signal from the noise prediction, then takes the
/// mean squared error against the true signal. The network head is unchanged.
pub fn loss_z0hat(tape: &mut Tape, schedule: &NoiseSchedule, z0: Var, zt: Var, eps_pred: Var, t: usize) -> Result<Var> {
    let z0_hat = predict_z0_taped(tape, schedule, zt, eps_pred, t)?;
    tape.mse(z0, z0_hat)
}

/// One forward-process draw.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub zt: Tensor,
}

impl DiffusionSample {
    pub fn new(schedule: &NoiseSchedule, z0: Tensor, eps: Tensor, t: usize) -> Result<Self> {
        let zt = forward_noise(schedule, &z0, &eps, t)?;
        Ok(Self { z0, eps, t, zt })
    }
}
