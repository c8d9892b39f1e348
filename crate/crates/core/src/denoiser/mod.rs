//! Noise predictors for the reverse process.

mod convnet;
mod model_file;
mod train;

pub use convnet::{ConvNet, LayerDesc};
pub use model_file::{read_model, write_model, ModelHeader, MODEL_MAGIC};
pub use train::{train_conv_denoiser, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Shape};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// An epsilon-predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser<T> {
    /// Exact predictor for a Gaussian data distribution with mean `mean`
    /// and diagonal variance `var` (both shaped like the data).
    AnalyticGaussian {
        mean: ImageTensor<T>,
        var: ImageTensor<T>,
    },
    /// Trained convolutional predictor; accepts any spatial size.
    ConvNet(ConvNet<T>),
}

impl<T: Scalar> Denoiser<T> {
    pub fn analytic_gaussian(mean: ImageTensor<T>, var: ImageTensor<T>) -> Result<Self> {
        mean.ensure_same_shape(&var, "gaussian mean and variance")?;
        if var.data().iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::param("gaussian variance must be positive and finite"));
        }
        if !mean.all_finite() {
            return Err(Error::param("gaussian mean must be finite"));
        }
        Ok(Denoiser::AnalyticGaussian { mean, var })
    }

    /// Shape required by the predictor, if fixed.
    pub fn expected_shape(&self) -> Option<Shape> {
        match self {
            Denoiser::AnalyticGaussian { mean, .. } => Some(mean.shape()),
            Denoiser::ConvNet(_) => None,
        }
    }

    pub fn check_shape(&self, shape: Shape) -> Result<()> {
        match self {
            Denoiser::AnalyticGaussian { mean, .. } if mean.shape() != shape => Err(Error::shape(
                format!("denoiser expects {}, got {shape}", mean.shape()),
            )),
            Denoiser::ConvNet(net) => convnet::expects_channels(net.image_channels(), shape),
            _ => Ok(()),
        }
    }

    /// Predicted noise `eps_hat(x_t, t)`.
    pub fn predict_eps(
        &self,
        x_t: &ImageTensor<T>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor<T>> {
        schedule.check_step(t)?;
        self.check_shape(x_t.shape())?;
        let eps = match self {
            Denoiser::AnalyticGaussian { mean, var } => {
                analytic_gaussian_eps(mean, var, x_t, t, schedule)?
            }
            Denoiser::ConvNet(net) => {
                if net.schedule_steps() != schedule.steps() {
                    return Err(Error::param(format!(
                        "network trained for T = {}, schedule has T = {}",
                        net.schedule_steps(),
                        schedule.steps()
                    )));
                }
                net.forward(x_t, t)?
            }
        };
        if !eps.all_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at t = {t}")));
        }
        Ok(eps)
    }
}

/// Closed-form noise prediction for `x0 ~ N(m, diag(v))`.
///
/// With `E[x0 | x_t] = m + sqrt(abar) v (x_t - sqrt(abar) m) / (abar v + 1 - abar)`,
/// `eps_hat = (x_t - sqrt(abar) E[x0 | x_t]) / sqrt(1 - abar)`, which simplifies
/// to `sqrt(1 - abar) (x_t - sqrt(abar) m) / (abar v + 1 - abar)`.
pub fn analytic_gaussian_eps<T: Scalar>(
    mean: &ImageTensor<T>,
    var: &ImageTensor<T>,
    x_t: &ImageTensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor<T>> {
    mean.ensure_same_shape(var, "gaussian mean and variance")?;
    mean.ensure_same_shape(x_t, "gaussian denoiser input")?;
    if var.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::param("gaussian variance must be positive"));
    }
    let ab = schedule.alpha_bar(t)?;
    schedule.check_step(t)?;
    let sa = T::lit(ab.sqrt());
    let sn = T::lit((1.0 - ab).sqrt());
    let abt = T::lit(ab);
    let one_minus = T::lit(1.0 - ab);
    let data = x_t
        .data()
        .iter()
        .zip(mean.data())
        .zip(var.data())
        .map(|((&x, &m), &v)| sn * (x - sa * m) / (abt * v + one_minus))
        .collect();
    ImageTensor::new(x_t.shape(), data)
}

/// Posterior mean `E[x0 | x_t]` for the Gaussian data model.
pub fn analytic_gaussian_posterior_mean<T: Scalar>(
    mean: &ImageTensor<T>,
    var: &ImageTensor<T>,
    x_t: &ImageTensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor<T>> {
    mean.ensure_same_shape(var, "gaussian mean and variance")?;
    mean.ensure_same_shape(x_t, "gaussian denoiser input")?;
    let ab = schedule.alpha_bar(t)?;
    let sa = T::lit(ab.sqrt());
    let abt = T::lit(ab);
    let one_minus = T::lit(1.0 - ab);
    let data = x_t
        .data()
        .iter()
        .zip(mean.data())
        .zip(var.data())
        .map(|((&x, &m), &v)| m + sa * v * (x - sa * m) / (abt * v + one_minus))
        .collect();
    ImageTensor::new(x_t.shape(), data)
}
