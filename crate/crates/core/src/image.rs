//! Planar image tensors in model range.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Height, width and channel count of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An `H x W x C` image, stored channel-planar (`data[c][y][x]`).
///
/// Values live in the model range `[-1, 1]`; intermediate diffusion states
/// may leave it. 8-bit storage maps `v = 2 * (v8 / 255) - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    shape: Shape,
    data: Vec<T>,
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n-1`, periodic with `2n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.channels == 0 {
            return Err(Error::shape("image needs at least one channel"));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "data length {} does not match {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    /// Builds an image from `f(channel, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.shape.height + y) * self.shape.width + x] = v;
    }

    /// Pixel access with symmetric reflection outside the image.
    #[inline]
    pub fn get_reflect(&self, c: usize, y: isize, x: isize) -> T {
        self.get(
            c,
            reflect_index(y, self.shape.height),
            reflect_index(x, self.shape.width),
        )
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "elementwise operation")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn clamp_model_range(&self) -> Self {
        self.clamp(-T::one(), T::one())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    /// Mean of `|self - other|`.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other, "mean_abs_diff")?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .sum::<f64>()
            / n)
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Channel-mean image (single channel).
    pub fn luminance(&self) -> Self {
        let p = self.shape.plane();
        let inv = T::one() / T::lit(self.shape.channels as f64);
        let mut out = vec![T::zero(); p];
        for c in 0..self.shape.channels {
            for (o, &v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        Self {
            shape: Shape::new(self.shape.height, self.shape.width, 1),
            data: out,
        }
    }

    /// Copies the window `[y0, y0+h) x [x0, x0+w)` with reflection outside.
    pub fn crop_reflect(&self, y0: isize, x0: isize, h: usize, w: usize) -> Self {
        let shape = Shape::new(h, w, self.shape.channels);
        Self::from_fn(shape, |c, y, x| {
            self.get_reflect(c, y0 + y as isize, x0 + x as isize)
        })
    }

    /// Interleaved 8-bit samples, rounding half away from zero.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let Shape {
            height,
            width,
            channels,
        } = self.shape;
        let mut out = vec![0u8; self.len()];
        for c in 0..channels {
            let plane = self.channel(c);
            for (i, &v) in plane.iter().enumerate() {
                out[i * channels + c] = model_to_u8(v.to_f64_lossy());
            }
        }
        debug_assert_eq!(out.len(), height * width * channels);
        out
    }

    pub fn from_u8_interleaved(shape: Shape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} bytes for {shape}",
                bytes.len()
            )));
        }
        let channels = shape.channels;
        let plane = shape.plane();
        let mut data = vec![T::zero(); shape.len()];
        for (i, &b) in bytes.iter().enumerate() {
            let (p, c) = (i / channels, i % channels);
            data[c * plane + p] = T::lit(u8_to_model(b));
        }
        Self::new(shape, data)
    }

    /// Round-trips through 8-bit storage.
    pub fn quantize_u8(&self) -> Self {
        self.map(|v| T::lit(u8_to_model(model_to_u8(v.to_f64_lossy()))))
    }

    /// Maps model range to `[0, 1]` (for quality metrics on stored images).
    pub fn to_unit_range(&self) -> Self {
        let half = T::lit(0.5);
        self.map(|v| (v + T::one()) * half)
    }
}

/// `v8 = round((v + 1) / 2 * 255)`, saturating; rounds half away from zero.
pub fn model_to_u8(v: f64) -> u8 {
    if !v.is_finite() {
        return if v > 0.0 { 255 } else { 0 };
    }
    let scaled = (v + 1.0) * 0.5 * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

pub fn u8_to_model(v: u8) -> f64 {
    2.0 * (v as f64 / 255.0) - 1.0
}
