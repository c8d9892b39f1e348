//! Similarity measures `D(x, x_in)` and their exact gradients.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// SSIM constants: Gaussian window (size 11, std 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, dynamic range `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range,
        }
    }

    /// `L = 2`, for images in model range `[-1, 1]`.
    pub fn model_range() -> Self {
        Self::with_range(2.0)
    }

    /// `L = 1`, for stored images mapped to `[0, 1]`.
    pub fn unit_range() -> Self {
        Self::with_range(1.0)
    }

    fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::param("SSIM window size must be odd"));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::param("SSIM constants must be positive"));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D window, shrunk (keeping it odd) to fit `limit` pixels.
    pub fn window(&self, limit: usize) -> Vec<f64> {
        let mut size = self.window_size.min(limit.max(1));
        if size % 2 == 0 {
            size -= 1;
        }
        let half = (size / 2) as f64;
        let w: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::model_range()
    }
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid<T: Scalar>(plane: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let out = &mut tmp[y * ow..(y + 1) * ow];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &kj) in k.iter().enumerate() {
                acc += kj * row[x + j];
            }
            *o = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        let o = &mut out[y * ow..(y + 1) * ow];
        for (i, &ki) in k.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (a, &b) in o.iter_mut().zip(src) {
                *a += ki * b;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back to `h x w`.
fn filter_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        let src = &g[y * ow..(y + 1) * ow];
        for (i, &ki) in k.iter().enumerate() {
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += ki * b;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &v) in src.iter().enumerate() {
            for (j, &kj) in k.iter().enumerate() {
                dst[x + j] += kj * v;
            }
        }
    }
    out
}

struct SsimParts<T> {
    value: f64,
    gradient: Option<ImageTensor<T>>,
}

fn ssim_impl<T: Scalar>(
    x: &ImageTensor<T>,
    y: &ImageTensor<T>,
    params: &SsimParams,
    with_gradient: bool,
) -> Result<SsimParts<T>> {
    params.validate()?;
    x.ensure_same_shape(y, "ssim")?;
    if x.is_empty() {
        return Err(Error::shape("ssim of an empty image"));
    }
    let (h, w) = (x.height(), x.width());
    let kernel: Vec<T> = params
        .window(h.min(w))
        .into_iter()
        .map(T::lit)
        .collect();
    let n = kernel.len();
    let positions = (h + 1 - n) * (w + 1 - n);
    let norm = T::lit((positions * x.channels()) as f64);
    let (c1, c2) = (T::lit(params.c1()), T::lit(params.c2()));
    let two = T::lit(2.0);

    let mut total = 0.0f64;
    let mut grad = if with_gradient {
        Some(ImageTensor::zeros(x.shape()))
    } else {
        None
    };
    for c in 0..x.channels() {
        let xs = x.channel(c);
        let ys = y.channel(c);
        let xx: Vec<T> = xs.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = ys.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = xs.iter().zip(ys).map(|(&a, &b)| a * b).collect();
        let mu_x = filter_valid(xs, h, w, &kernel);
        let mu_y = filter_valid(ys, h, w, &kernel);
        let e_xx = filter_valid(&xx, h, w, &kernel);
        let e_yy = filter_valid(&yy, h, w, &kernel);
        let e_xy = filter_valid(&xy, h, w, &kernel);

        let mut g_mu = if with_gradient { vec![T::zero(); positions] } else { Vec::new() };
        let mut g_xx = g_mu.clone();
        let mut g_xy = g_mu.clone();
        let mut channel_sum = 0.0f64;
        for p in 0..positions {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let a1 = two * mx * my + c1;
            let b1 = mx * mx + my * my + c1;
            let sxx = e_xx[p] - mx * mx;
            let syy = e_yy[p] - my * my;
            let sxy = e_xy[p] - mx * my;
            let a2 = two * sxy + c2;
            let b2 = sxx + syy + c2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            channel_sum += s.to_f64_lossy();
            if with_gradient {
                g_mu[p] = two * my * (a2 - a1) / d + two * mx * s * (b2.recip() - b1.recip());
                g_xx[p] = -s / b2;
                g_xy[p] = two * a1 / d;
            }
        }
        total += channel_sum;
        if let Some(grad) = grad.as_mut() {
            let f_mu = filter_valid_adjoint(&g_mu, h, w, &kernel);
            let f_xx = filter_valid_adjoint(&g_xx, h, w, &kernel);
            let f_xy = filter_valid_adjoint(&g_xy, h, w, &kernel);
            let out = grad.channel_mut(c);
            for i in 0..h * w {
                out[i] = (f_mu[i] + two * xs[i] * f_xx[i] + ys[i] * f_xy[i]) / norm;
            }
        }
    }
    Ok(SsimParts {
        value: total / (positions * x.channels()) as f64,
        gradient: grad,
    })
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim<T: Scalar>(x: &ImageTensor<T>, y: &ImageTensor<T>, params: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(x, y, params, false)?.value)
}

/// `(ssim(x, y), d ssim / d x)`.
pub fn ssim_with_gradient<T: Scalar>(
    x: &ImageTensor<T>,
    y: &ImageTensor<T>,
    params: &SsimParams,
) -> Result<(f64, ImageTensor<T>)> {
    let parts = ssim_impl(x, y, params, true)?;
    Ok((parts.value, parts.gradient.expect("gradient requested")))
}

/// Guidance distance `D(x, x_in)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GuidanceMetric {
    /// `D = -ssim(x, x_in)`.
    NegSsim(SsimParams),
    /// `D = mean((x - x_in)^2)`.
    Mse,
}

impl Default for GuidanceMetric {
    fn default() -> Self {
        GuidanceMetric::NegSsim(SsimParams::model_range())
    }
}

impl GuidanceMetric {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMetric::NegSsim(_) => "ssim",
            GuidanceMetric::Mse => "mse",
        }
    }
}

impl FromStr for GuidanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssim" | "neg-ssim" | "negssim" => Ok(GuidanceMetric::default()),
            "mse" => Ok(GuidanceMetric::Mse),
            other => Err(Error::param(format!("unknown guidance metric '{other}'"))),
        }
    }
}

pub fn metric_value<T: Scalar>(
    metric: &GuidanceMetric,
    x: &ImageTensor<T>,
    x_in: &ImageTensor<T>,
) -> Result<f64> {
    match metric {
        GuidanceMetric::Mse => {
            x.ensure_same_shape(x_in, "mse")?;
            let n = x.len().max(1) as f64;
            Ok(x
                .data()
                .iter()
                .zip(x_in.data())
                .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
                .sum::<f64>()
                / n)
        }
        GuidanceMetric::NegSsim(p) => Ok(-ssim(x, x_in, p)?),
    }
}

/// Exact gradient of [`metric_value`] with respect to `x`.
pub fn metric_gradient<T: Scalar>(
    metric: &GuidanceMetric,
    x: &ImageTensor<T>,
    x_in: &ImageTensor<T>,
) -> Result<ImageTensor<T>> {
    match metric {
        GuidanceMetric::Mse => {
            let scale = T::lit(2.0 / x.len().max(1) as f64);
            x.zip_map(x_in, |a, b| scale * (a - b))
        }
        GuidanceMetric::NegSsim(p) => Ok(ssim_with_gradient(x, x_in, p)?.1.map(|g| -g)),
    }
}
