//! Forward noising, ancestral reverse steps and purification.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{metric_gradient, GuidanceMetric};
use crate::image::{reflect_index, ImageTensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::seed::{derive_seed, NoiseStream};
use crate::tiler::{merge_patches, split_patches};

/// Settings of one purification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurifyConfig {
    pub t_star: usize,
    pub guided: bool,
    pub base_scale: f64,
    pub metric: GuidanceMetric,
    pub seed: u64,
    pub clamp_each_step: bool,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            t_star: 40,
            guided: false,
            base_scale: 1e6,
            metric: GuidanceMetric::default(),
            seed: 0,
            clamp_each_step: false,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_star > schedule.steps() {
            return Err(Error::param(format!(
                "t_star {} exceeds T = {}",
                self.t_star,
                schedule.steps()
            )));
        }
        if !(self.base_scale >= 0.0 && self.base_scale.is_finite()) {
            return Err(Error::param(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.base_scale
            )));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample<T: Scalar>(
    x0: &ImageTensor<T>,
    t: usize,
    eps: &ImageTensor<T>,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor<T>> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean of the reverse transition, `(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)`.
fn reverse_mean<T: Scalar>(
    x_t: &ImageTensor<T>,
    t: usize,
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor<T>> {
    let eps = denoiser.predict_eps(x_t, t, schedule)?;
    let beta = schedule.beta(t)?;
    let k = T::lit(beta / (1.0 - schedule.alpha_bar(t)?).sqrt());
    let inv = T::lit(1.0 / schedule.alpha(t)?.sqrt());
    x_t.zip_map(&eps, |x, e| (x - k * e) * inv)
}

fn add_noise<T: Scalar>(
    mut mean: ImageTensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&ImageTensor<T>>,
) -> Result<ImageTensor<T>> {
    let sigma = schedule.sigma(t)?;
    if let Some(noise) = noise {
        mean.ensure_same_shape(noise, "reverse step noise")?;
        if sigma > 0.0 {
            let s = T::lit(sigma);
            for (m, &n) in mean.data_mut().iter_mut().zip(noise.data()) {
                *m += s * n;
            }
        }
    }
    if !mean.all_finite() {
        return Err(Error::Numeric(format!("non-finite state after reverse step {t}")));
    }
    Ok(mean)
}

/// One ancestral step `x_t -> x_{t-1}`: `mu + sigma_t noise`.
pub fn reverse_step<T: Scalar>(
    x_t: &ImageTensor<T>,
    t: usize,
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    noise: &ImageTensor<T>,
) -> Result<ImageTensor<T>> {
    let mean = reverse_mean(x_t, t, denoiser, schedule)?;
    add_noise(mean, t, schedule, Some(noise))
}

/// Guided step: `mu - s_t sigma_t^2 grad D(x_t, x_in) + sigma_t noise`.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step<T: Scalar>(
    x_t: &ImageTensor<T>,
    t: usize,
    x_in: &ImageTensor<T>,
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    metric: &GuidanceMetric,
    base_scale: f64,
    noise: &ImageTensor<T>,
) -> Result<ImageTensor<T>> {
    guided_step_opt(x_t, t, x_in, denoiser, schedule, metric, base_scale, Some(noise))
}

#[allow(clippy::too_many_arguments)]
fn guided_step_opt<T: Scalar>(
    x_t: &ImageTensor<T>,
    t: usize,
    x_in: &ImageTensor<T>,
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    metric: &GuidanceMetric,
    base_scale: f64,
    noise: Option<&ImageTensor<T>>,
) -> Result<ImageTensor<T>> {
    x_t.ensure_same_shape(x_in, "guidance reference")?;
    let mut mean = reverse_mean(x_t, t, denoiser, schedule)?;
    let shift = schedule.guidance_scale(t, base_scale)? * schedule.sigma(t)?.powi(2);
    if shift != 0.0 {
        let grad = metric_gradient(metric, x_t, x_in)?;
        let k = T::lit(shift);
        for (m, &g) in mean.data_mut().iter_mut().zip(grad.data()) {
            *m -= k * g;
        }
    }
    add_noise(mean, t, schedule, noise)
}

/// Diffuses `x_in` to `t_star` and runs the reverse chain back to 0.
///
/// One stream seeded by `config.seed` supplies the forward noise first and
/// then the per-step noise (no draw on steps with `sigma_t = 0`). The result
/// is clamped to `[-1, 1]`.
pub fn purify<T: Scalar>(
    x_in: &ImageTensor<T>,
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    config: &PurifyConfig,
) -> Result<ImageTensor<T>> {
    config.validate(schedule)?;
    denoiser.check_shape(x_in.shape())?;
    if config.t_star == 0 {
        return Ok(x_in.clamp_model_range());
    }
    let mut rng = NoiseStream::new(config.seed);
    let eps = rng.normal_image(x_in.shape());
    let mut x = forward_sample(x_in, config.t_star, &eps, schedule)?;
    for t in (1..=config.t_star).rev() {
        let noise = (schedule.sigma(t)? > 0.0).then(|| rng.normal_image(x.shape()));
        x = if config.guided {
            guided_step_opt(
                &x,
                t,
                x_in,
                denoiser,
                schedule,
                &config.metric,
                config.base_scale,
                noise.as_ref(),
            )?
        } else {
            let mean = reverse_mean(&x, t, denoiser, schedule)?;
            add_noise(mean, t, schedule, noise.as_ref())?
        };
        if config.clamp_each_step {
            x = x.clamp_model_range();
        }
    }
    Ok(x.clamp_model_range())
}

/// Patchwise purification: tiles of side `patch`, each with its own stream
/// seeded by `hash(config.seed, image_id, patch_index)`.
pub fn purify_tiled<T: Scalar>(
    image: &ImageTensor<T>,
    image_id: u64,
    patch: usize,
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    config: &PurifyConfig,
) -> Result<ImageTensor<T>> {
    let (patches, layout) = split_patches(image, patch)?;
    let purified = patches
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cfg = PurifyConfig {
                seed: derive_seed(config.seed, &[image_id, i as u64]),
                ..*config
            };
            purify(p, denoiser, schedule, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_patches(&purified, &layout)
}

/// Unclamped reverse chain from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample_chain<T: Scalar>(
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    shape: crate::image::Shape,
    rng: &mut NoiseStream,
) -> Result<ImageTensor<T>> {
    let mut x = rng.normal_image(shape);
    for t in (1..=schedule.steps()).rev() {
        let noise = (schedule.sigma(t)? > 0.0).then(|| rng.normal_image(shape));
        let mean = reverse_mean(&x, t, denoiser, schedule)?;
        x = add_noise(mean, t, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Per-channel `kernel x kernel` median filter with symmetric reflection.
pub fn median_purify<T: Scalar>(x_in: &ImageTensor<T>, kernel: usize) -> Result<ImageTensor<T>> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::param(format!("median kernel must be odd and >= 3, got {kernel}")));
    }
    let r = (kernel / 2) as isize;
    let (h, w) = (x_in.height(), x_in.width());
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = ImageTensor::zeros(x_in.shape());
    for c in 0..x_in.channels() {
        let plane = x_in.channel(c);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let sy = reflect_index(y as isize + dy, h);
                    for dx in -r..=r {
                        window.push(plane[sy * w + reflect_index(x as isize + dx, w)]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| {
                    a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
                });
                out.set(c, y, x, *m);
            }
        }
    }
    Ok(out)
}
