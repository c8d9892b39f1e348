//! Linear noise schedule and per-step constants.

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Per-step constants of a diffusion process with `T` steps.
///
/// Arrays are indexed by step `t` in `1..=T` through the accessor methods;
/// `alpha_bar(0) = 1` by convention. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    ///
    /// The reverse-step standard deviation uses the posterior variance
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`, so `sigma_1 = 0`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            beta_start,
            beta_end,
        })
    }

    /// `T = 1000`, `beta` from `1e-4` to `0.02`.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn step_index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                index: t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        self.step_index(t).map(|_| ())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.step_index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.step_index(t)?])
    }

    /// `abar_t`; `1` at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.step_index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.step_index(t)?])
    }

    /// Time-dependent guidance scale `s * sqrt(1 - abar_t) / sqrt(abar_t)`.
    pub fn guidance_scale(&self, t: usize, base_scale: f64) -> Result<f64> {
        if base_scale < 0.0 || !base_scale.is_finite() {
            return Err(Error::param(format!(
                "guidance scale must be finite and >= 0, got {base_scale}"
            )));
        }
        let ab = self.alpha_bars[self.step_index(t)?];
        Ok(guidance_scale_for(ab, base_scale))
    }
}

pub(crate) fn guidance_scale_for(alpha_bar: f64, base_scale: f64) -> f64 {
    base_scale * (1.0 - alpha_bar).sqrt() / alpha_bar.sqrt()
}
