//! Per-timestep loss analysis and image proxy metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::diffusion::{forward_noise, loss_epsilon, loss_x0_direct, loss_z0hat, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::model::{Attached, DenoiserModel};
use crate::tensor::Tensor;

pub const DEFAULT_BUCKETS: usize = 5;
/// Side of the square pixel patches the style statistics are pooled over.
pub const STYLE_PATCH: usize = 4;

/// One evaluated `(image, t, eps)` draw.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileSample {
    pub bucket: usize,
    pub t: usize,
    pub image: usize,
    pub loss_eps: f64,
    pub loss_x0_direct: f64,
    pub loss_z0hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBucket {
    /// Inclusive timestep range.
    pub t_lo: usize,
    pub t_hi: usize,
    pub count: usize,
    pub mean_eps: f64,
    pub mean_x0_direct: f64,
    pub mean_z0hat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossProfile {
    pub buckets: Vec<LossBucket>,
    pub samples: Vec<ProfileSample>,
}

/// Splits `1..=T` into `n` contiguous near-equal inclusive ranges.
pub fn bucket_bounds(timesteps: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|b| (b * timesteps / n + 1, (b + 1) * timesteps / n))
        .collect()
}

/// Draws `evals_per_bucket` samples per timestep bucket and records all
/// three losses from a single forward pass per sample.
pub fn timestep_loss_profile(
    model: &DenoiserModel,
    dataset: &[Tensor],
    schedule: &NoiseSchedule,
    evals_per_bucket: usize,
    seed: u64,
) -> Result<LossProfile> {
    timestep_loss_profile_with(model, &[], None, dataset, schedule, DEFAULT_BUCKETS, evals_per_bucket, seed)
}

/// As [`timestep_loss_profile`], with optional adapters, condition vector and
/// bucket count. Images are expected in `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn timestep_loss_profile_with(
    model: &DenoiserModel,
    loras: &[Attached<'_>],
    cond: Option<&[f64]>,
    dataset: &[Tensor],
    schedule: &NoiseSchedule,
    buckets: usize,
    evals_per_bucket: usize,
    seed: u64,
) -> Result<LossProfile> {
    if dataset.is_empty() {
        return Err(Error::Invalid("loss profile needs a non-empty dataset".into()));
    }
    if buckets == 0 || buckets > schedule.timesteps() {
        return Err(Error::Invalid(format!("bucket count {buckets} invalid")));
    }
    let zero = vec![0.0; model.config().embedding_dim];
    let cond = cond.unwrap_or(&zero);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(buckets * evals_per_bucket);
    let bounds = bucket_bounds(schedule.timesteps(), buckets);
    for (b, &(lo, hi)) in bounds.iter().enumerate() {
        for _ in 0..evals_per_bucket {
            let image = rng.random_range(0..dataset.len());
            let t = rng.random_range(lo..=hi);
            let z0 = &dataset[image];
            let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
            let zt = forward_noise(schedule, z0, &eps, t)?;
            let pred = model.predict(&zt, t, cond, loras)?;

            let mut tape = Tape::new();
            let (z0v, ztv, ev, pv) = (
                tape.constant(z0.clone()),
                tape.constant(zt),
                tape.constant(eps),
                tape.constant(pred),
            );
            let le = loss_epsilon(&mut tape, ev, pv)?;
            let lx = loss_x0_direct(&mut tape, z0v, pv)?;
            let lz = loss_z0hat(&mut tape, schedule, z0v, ztv, pv, t)?;
            samples.push(ProfileSample {
                bucket: b,
                t,
                image,
                loss_eps: tape.value(le).item(),
                loss_x0_direct: tape.value(lx).item(),
                loss_z0hat: tape.value(lz).item(),
            });
        }
    }
    let buckets = bounds
        .iter()
        .enumerate()
        .map(|(b, &(lo, hi))| {
            let mine: Vec<&ProfileSample> = samples.iter().filter(|s| s.bucket == b).collect();
            let n = mine.len();
            let mean = |f: fn(&ProfileSample) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    mine.iter().map(|s| f(s)).sum::<f64>() / n as f64
                }
            };
            LossBucket {
                t_lo: lo,
                t_hi: hi,
                count: n,
                mean_eps: mean(|s| s.loss_eps),
                mean_x0_direct: mean(|s| s.loss_x0_direct),
                mean_z0hat: mean(|s| s.loss_z0hat),
            }
        })
        .collect();
    Ok(LossProfile { buckets, samples })
}

/// `(t, (1 - alpha_bar_t) / alpha_bar_t)` for `t` in `1..=T`.
pub fn scaling_factor_curve(schedule: &NoiseSchedule) -> Vec<(usize, f64)> {
    (1..=schedule.timesteps())
        .map(|t| (t, schedule.z0hat_loss_factor(t)))
        .collect()
}

fn check_image_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
}

/// Per-patch channel means followed by channel standard deviations,
/// one row per `STYLE_PATCH x STYLE_PATCH` patch.
pub fn patch_statistics(img: &Tensor) -> Vec<Vec<f64>> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let p = STYLE_PATCH.min(h).min(w);
    let d = img.data();
    let mut rows = Vec::new();
    for py in 0..h / p {
        for px in 0..w / p {
            let mut feat = vec![0.0; 2 * c];
            let n = (p * p) as f64;
            for ch in 0..c {
                let vals = (0..p).flat_map(|dy| (0..p).map(move |dx| (py * p + dy, px * p + dx)));
                let vals: Vec<f64> = vals.map(|(y, x)| d[(y * w + x) * c + ch]).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                feat[ch] = mean;
                feat[c + ch] = var.sqrt();
            }
            rows.push(feat);
        }
    }
    rows
}

/// Gram matrix `F^T F / P` of the patch statistics.
pub fn style_gram(img: &Tensor) -> Vec<f64> {
    let rows = patch_statistics(img);
    let k = rows[0].len();
    let np = rows.len() as f64;
    let mut g = vec![0.0; k * k];
    for r in &rows {
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] += r[i] * r[j];
            }
        }
    }
    g.iter_mut().for_each(|v| *v /= np);
    g
}

/// Mean squared difference of the patch-statistic Gram matrices.
pub fn gram_style_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_image_pair("gram_style_distance", a, b)?;
    let (ga, gb) = (style_gram(a), style_gram(b));
    Ok(ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ga.len() as f64)
}

/// Channel-mean grayscale, average-pooled down to 8x8 (or the image size if
/// smaller). Pool windows are `floor(H/8) x floor(W/8)`.
pub fn gray_thumbnail(img: &Tensor) -> Vec<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (oh, ow) = (8.min(h), 8.min(w));
    let (ph, pw) = (h / oh, w / ow);
    let d = img.data();
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for y in oy * ph..(oy + 1) * ph {
                for x in ox * pw..(ox + 1) * pw {
                    s += d[(y * w + x) * c..(y * w + x + 1) * c].iter().sum::<f64>() / c as f64;
                }
            }
            out[oy * ow + ox] = s / (ph * pw) as f64;
        }
    }
    out
}

/// Structure-biased pixel error: MSE between grayscale 8x8 thumbnails.
pub fn content_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_image_pair("content_mse", a, b)?;
    let (ta, tb) = (gray_thumbnail(a), gray_thumbnail(b));
    Ok(ta.iter().zip(&tb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ta.len() as f64)
}

/// Plain per-element MSE.
pub fn pixel_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_image_pair("pixel_mse", a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64)
}
