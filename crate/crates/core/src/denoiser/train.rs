//! Noise-prediction training loop (Adam on the epsilon MSE).

use serde::{Deserialize, Serialize};

use super::convnet::ConvNet;
use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::seed::NoiseStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Side of the square training crops.
    pub patch_size: usize,
    pub hidden_channels: usize,
    /// Largest step sampled during training; `None` means the full schedule.
    pub t_max: Option<usize>,
    /// Loss is averaged and logged every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            patch_size: 32,
            hidden_channels: 32,
            t_max: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 || self.hidden_channels == 0 || self.log_every == 0 {
            return Err(Error::param("batch size, patch size, hidden channels and log interval must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(t) = self.t_max {
            if t == 0 || t > schedule.steps() {
                return Err(Error::param(format!("t_max must lie in 1..={}", schedule.steps())));
            }
        }
        Ok(())
    }
}

/// Loss trace of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(iteration, mean loss over the preceding interval)`.
    pub losses: Vec<(usize, f64)>,
    pub first_loss: Option<f64>,
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
    lr: f64,
}

impl<T: Scalar> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [T], grad: &[T]) {
        self.step += 1;
        let (b1, b2) = (T::lit(Self::B1), T::lit(Self::B2));
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let step = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(Self::EPS * c2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Trains a standard-architecture network on random crops of `dataset`.
///
/// Each iteration draws, per batch element, an image, a crop position, a step
/// `t` uniform in `1..=t_max` and Gaussian noise, all from one seeded stream.
pub fn train_conv_denoiser<T: Scalar>(
    dataset: &[ImageTensor<T>],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(ConvNet<T>, TrainReport)> {
    config.validate(schedule)?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::param("training dataset is empty"))?;
    let channels = first.channels();
    for img in dataset {
        if img.channels() != channels {
            return Err(Error::shape("training images disagree on channel count"));
        }
        if img.height() < config.patch_size || img.width() < config.patch_size {
            return Err(Error::Size(format!(
                "training image {} smaller than patch {}",
                img.shape(),
                config.patch_size
            )));
        }
    }
    let layers = ConvNet::<T>::standard_layers(channels, config.hidden_channels);
    let mut net = ConvNet::new(layers, schedule.steps(), config.seed)?;
    let mut report = TrainReport::default();
    if config.iterations == 0 {
        return Ok((net, report));
    }

    let t_max = config.t_max.unwrap_or(schedule.steps());
    let p = config.patch_size;
    let mut rng = NoiseStream::derived(config.seed, &[0x7EA1]);
    let mut adam = Adam::new(net.param_count(), config.learning_rate);
    let mut interval = 0.0;
    let mut interval_len = 0;
    for it in 0..config.iterations {
        let mut noisy = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        let mut steps = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let img = &dataset[rng.below(0, dataset.len())];
            let y0 = rng.below(0, img.height() - p + 1);
            let x0 = rng.below(0, img.width() - p + 1);
            let crop = img.crop_reflect(y0 as isize, x0 as isize, p, p);
            let t = rng.below(1, t_max + 1);
            let eps = rng.normal_image::<T>(crop.shape());
            noisy.push(forward_sample(&crop, t, &eps, schedule)?);
            targets.push(eps);
            steps.push(t);
        }
        let batch: Vec<_> = (0..config.batch_size)
            .map(|i| (&noisy[i], steps[i], &targets[i]))
            .collect();
        let (loss, grad) = net.loss_and_gradient(&batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { iteration: it, loss });
        }
        report.first_loss.get_or_insert(loss);
        adam.update(net.params_mut(), &grad);
        interval += loss;
        interval_len += 1;
        if interval_len == config.log_every || it + 1 == config.iterations {
            let mean = interval / interval_len as f64;
            log::info!("train iteration {}: loss {mean:.5}", it + 1);
            report.losses.push((it + 1, mean));
            interval = 0.0;
            interval_len = 0;
        }
    }
    if net.params().iter().any(|w| !w.is_finite()) {
        return Err(Error::Training {
            iteration: config.iterations,
            loss: f64::NAN,
        });
    }
    Ok((net, report))
}
