//! Synthetic camera pipeline and splice forgeries with ground-truth masks.
//!
//! Pipeline: multi-scale value-noise texture, Bayer sampling, bilinear
//! demosaicing, optional 8x8 block-DCT quantization, 8-bit rounding,
//! Gaussian sensor noise, 8-bit rounding again. Values are returned in model
//! range.

use serde::{Deserialize, Serialize};

use crate::dct::{Dct8, BLOCK};
use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageTensor, Shape};
use crate::metrics::Mask;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, NoiseStream};

pub const MIN_SIZE: usize = 64;

/// Camera traces of one synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Position of the red sample in each 2x2 cell: 0 = RGGB, 1 = GRBG,
    /// 2 = GBRG, 3 = BGGR.
    pub bayer_phase: u8,
    pub quantize: bool,
    /// Quantizer step is `1 / quality` in 8-bit units.
    pub quality: f64,
    /// Top-left corner of the first full 8x8 block, each in `0..8`.
    pub grid_origin: (usize, usize),
    /// Sensor noise standard deviation in 8-bit units.
    pub noise_std: f64,
    pub texture_seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            bayer_phase: 0,
            quantize: true,
            quality: 0.2,
            grid_origin: (0, 0),
            noise_std: 3.0,
            texture_seed: 0,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        if self.bayer_phase > 3 {
            return Err(Error::param(format!("bayer phase {} not in 0..4", self.bayer_phase)));
        }
        if !(self.quality > 0.0 && self.quality <= 1.0) {
            return Err(Error::param(format!("quality {} not in (0, 1]", self.quality)));
        }
        if self.grid_origin.0 >= BLOCK || self.grid_origin.1 >= BLOCK {
            return Err(Error::param("grid origin must lie in 0..8"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::param("noise std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Color channel sampled at `(y, x)` for a Bayer phase (0 = R, 1 = G, 2 = B).
pub fn bayer_channel(phase: u8, y: usize, x: usize) -> usize {
    let (ry, rx) = ((phase as usize) >> 1, (phase as usize) & 1);
    let (dy, dx) = ((y + ry) & 1, (x + rx) & 1);
    match (dy, dx) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Smooth lattice noise: bilinear interpolation of random values on a grid
/// of spacing `period`, with a random offset.
fn value_noise(h: usize, w: usize, period: f64, rng: &mut NoiseStream) -> Vec<f64> {
    let gh = (h as f64 / period).ceil() as usize + 2;
    let gw = (w as f64 / period).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let (oy, ox) = (rng.uniform(), rng.uniform());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / period + oy;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..w {
            let fx = x as f64 / period + ox;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let l = |a: usize, b: usize| lattice[a * gw + b];
            let top = l(iy, ix) * (1.0 - sx) + l(iy, ix + 1) * sx;
            let bottom = l(iy + 1, ix) * (1.0 - sx) + l(iy + 1, ix + 1) * sx;
            out[y * w + x] = top * (1.0 - sy) + bottom * sy;
        }
    }
    out
}

const OCTAVES: [(f64, f64); 5] = [(64.0, 1.0), (32.0, 0.6), (16.0, 0.4), (8.0, 0.25), (4.0, 0.15)];

/// Scene radiance in `[0, 255]`, three channels, before any camera trace.
fn texture(size: usize, seed: u64) -> [Vec<f64>; 3] {
    let mut rng = NoiseStream::derived(seed, &[0x7E_47]);
    let n = size * size;
    let mut lum = vec![0.0; n];
    for (period, amp) in OCTAVES {
        for (l, v) in lum.iter_mut().zip(value_noise(size, size, period, &mut rng)) {
            *l += amp * v;
        }
    }
    let norm: f64 = OCTAVES.iter().map(|(_, a)| a * a).sum::<f64>().sqrt();
    let tint = [rng.uniform() - 0.5, 0.0, rng.uniform() - 0.5];
    let chroma: Vec<Vec<f64>> = (0..2).map(|_| value_noise(size, size, 48.0, &mut rng)).collect();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let base = 128.0 + 70.0 * lum[i] / norm;
        out[0][i] = base + 25.0 * (tint[0] + chroma[0][i]);
        out[1][i] = base;
        out[2][i] = base + 25.0 * (tint[2] + chroma[1][i]);
    }
    for ch in &mut out {
        ch.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }
    out
}

/// Bilinear demosaicing by normalized convolution.
fn demosaic(scene: &[Vec<f64>; 3], size: usize, phase: u8) -> [Vec<f64>; 3] {
    const RB: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    const G: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
    let mut out = [vec![0.0; size * size], vec![0.0; size * size], vec![0.0; size * size]];
    for (c, plane) in out.iter_mut().enumerate() {
        let k = if c == 1 { &G } else { &RB };
        for y in 0..size {
            for x in 0..size {
                let (mut num, mut den) = (0.0, 0.0);
                for (dy, row) in k.iter().enumerate() {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= size as isize {
                        continue;
                    }
                    for (dx, &wgt) in row.iter().enumerate() {
                        let sx = x as isize + dx as isize - 1;
                        if wgt == 0.0 || sx < 0 || sx >= size as isize {
                            continue;
                        }
                        let (sy, sx) = (sy as usize, sx as usize);
                        if bayer_channel(phase, sy, sx) == c {
                            num += wgt * scene[c][sy * size + sx];
                            den += wgt;
                        }
                    }
                }
                plane[y * size + x] = if den > 0.0 { num / den } else { scene[c][y * size + x] };
            }
        }
    }
    out
}

/// Uniform quantization of every full 8x8 block on the grid anchored at `origin`.
fn block_quantize(plane: &mut [f64], size: usize, origin: (usize, usize), step: f64, dct: &Dct8) {
    let mut block = [0.0; 64];
    let mut by = origin.0;
    while by + BLOCK <= size {
        let mut bx = origin.1;
        while bx + BLOCK <= size {
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    block[y * BLOCK + x] = plane[(by + y) * size + bx + x];
                }
            }
            let mut c = dct.forward(&block);
            c.iter_mut().for_each(|v| *v = (*v / step).round() * step);
            let back = dct.inverse(&c);
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    plane[(by + y) * size + bx + x] = back[y * BLOCK + x];
                }
            }
            bx += BLOCK;
        }
        by += BLOCK;
    }
}

fn round_u8(plane: &mut [f64]) {
    plane.iter_mut().for_each(|v| *v = v.round().clamp(0.0, 255.0));
}

/// Generates one clean `size x size` RGB image.
pub fn synth_clean<T: Scalar>(seed: u64, size: usize, params: &PipelineParams) -> Result<ImageTensor<T>> {
    params.validate()?;
    if size < MIN_SIZE {
        return Err(Error::Size(format!("synthetic images need size >= {MIN_SIZE}, got {size}")));
    }
    let mut scene = texture(size, derive_seed(seed, &[params.texture_seed]));
    if params.noise_std > 0.0 {
        // sensor noise lands on the mosaic samples, before interpolation
        let mut rng = NoiseStream::derived(seed, &[params.texture_seed, 0x5E_45]);
        for y in 0..size {
            for x in 0..size {
                let c = bayer_channel(params.bayer_phase, y, x);
                scene[c][y * size + x] += params.noise_std * rng.normal();
            }
        }
    }
    let mut planes = demosaic(&scene, size, params.bayer_phase);
    let dct = Dct8::new();
    for p in &mut planes {
        if params.quantize {
            block_quantize(p, size, params.grid_origin, 1.0 / params.quality, &dct);
        }
        round_u8(p);
    }
    let shape = Shape::new(size, size, 3);
    Ok(ImageTensor::from_fn(shape, |c, y, x| {
        T::lit(2.0 * planes[c][y * size + x] / 255.0 - 1.0)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    Rect { top: usize, left: usize, height: usize, width: usize },
    Disk { cy: usize, cx: usize, radius: usize },
}

impl Region {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Region::Rect { top, left, height, width } => {
                y >= top && y < top + height && x >= left && x < left + width
            }
            Region::Disk { cy, cx, radius } => {
                let (dy, dx) = (y as f64 - cy as f64, x as f64 - cx as f64);
                radius > 0 && dy * dy + dx * dx <= (radius * radius) as f64
            }
        }
    }

    /// Half-open bounding box `(top, left, bottom, right)`, possibly empty.
    fn bounds(&self) -> (isize, isize, isize, isize) {
        match *self {
            Region::Rect { top, left, height, width } => (
                top as isize,
                left as isize,
                (top + height) as isize,
                (left + width) as isize,
            ),
            Region::Disk { cy, cx, radius } => {
                let (cy, cx, r) = (cy as isize, cx as isize, radius as isize);
                if r == 0 {
                    (cy, cx, cy, cx)
                } else {
                    (cy - r, cx - r, cy + r + 1, cx + r + 1)
                }
            }
        }
    }

    fn is_empty(&self) -> bool {
        let (t, l, b, r) = self.bounds();
        b <= t || r <= l
    }
}

/// A donor region in donor coordinates and where it lands in the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgerySpec {
    pub region: Region,
    /// Target position minus donor position, `(dy, dx)`.
    pub offset: (isize, isize),
    pub donor: PipelineParams,
}

fn check_inside(bounds: (isize, isize, isize, isize), h: usize, w: usize, what: &str) -> Result<()> {
    let (t, l, b, r) = bounds;
    if t < 0 || l < 0 || b > h as isize || r > w as isize {
        return Err(Error::Geometry(format!(
            "{what} region [{t}, {b}) x [{l}, {r}) outside {h}x{w}"
        )));
    }
    Ok(())
}

/// Pastes the donor region into the target; the mask is the pasted support.
pub fn make_forgery<T: Scalar>(
    target: &ImageTensor<T>,
    donor: &ImageTensor<T>,
    spec: &ForgerySpec,
) -> Result<(ImageTensor<T>, Mask)> {
    if target.channels() != donor.channels() {
        return Err(Error::shape("target and donor channel counts differ"));
    }
    let (h, w) = (target.height(), target.width());
    let mut forged = target.clone();
    let mut mask = Mask::zeros(h, w);
    if spec.region.is_empty() {
        return Ok((forged, mask));
    }
    let (t, l, b, r) = spec.region.bounds();
    check_inside((t, l, b, r), donor.height(), donor.width(), "donor")?;
    let (dy, dx) = spec.offset;
    check_inside((t + dy, l + dx, b + dy, r + dx), h, w, "pasted")?;
    for y in t as usize..b as usize {
        for x in l as usize..r as usize {
            if !spec.region.contains(y, x) {
                continue;
            }
            let (ty, tx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
            for c in 0..target.channels() {
                forged.set(c, ty, tx, donor.get(c, y, x));
            }
            mask.set(ty, tx, true);
        }
    }
    Ok((forged, mask))
}

/// Settings of the default forged dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetRecipe {
    pub count: usize,
    pub size: usize,
    pub region: usize,
    pub target: PipelineParams,
    /// Bayer phase offset of the donor relative to the target (mod 4).
    pub donor_phase_shift: u8,
    pub donor_grid_origin: (usize, usize),
    /// Donor sensor noise as a multiple of the target's.
    pub donor_noise_factor: f64,
    /// Quantizer quality of the donor; the target's when unset.
    pub donor_quality: Option<f64>,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            count: 20,
            size: 256,
            region: 64,
            target: PipelineParams::default(),
            donor_phase_shift: 1,
            donor_grid_origin: (4, 4),
            donor_noise_factor: 20.0,
            donor_quality: Some(0.02),
        }
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct ForgedSample<T> {
    pub id: usize,
    pub clean: ImageTensor<T>,
    pub forged: ImageTensor<T>,
    pub mask: Mask,
    pub target_params: PipelineParams,
    pub spec: ForgerySpec,
}

/// Generates sample `id` of a dataset; pure in `(seed, id, recipe)`.
pub fn forged_sample<T: Scalar>(seed: u64, id: usize, recipe: &DatasetRecipe) -> Result<ForgedSample<T>> {
    if recipe.region == 0 || recipe.region > recipe.size {
        return Err(Error::Geometry(format!(
            "region {} does not fit image {}",
            recipe.region, recipe.size
        )));
    }
    let mut rng = NoiseStream::derived(seed, &[id as u64, 0xF0_46]);
    let target_params = PipelineParams {
        texture_seed: rng.next_u64(),
        ..recipe.target
    };
    let donor_params = PipelineParams {
        bayer_phase: (target_params.bayer_phase + recipe.donor_phase_shift) % 4,
        grid_origin: recipe.donor_grid_origin,
        noise_std: recipe.target.noise_std * recipe.donor_noise_factor,
        quality: recipe.donor_quality.unwrap_or(recipe.target.quality),
        texture_seed: rng.next_u64(),
        ..recipe.target
    };
    let margin = (recipe.size - recipe.region) / 8;
    let lo = margin;
    let hi = recipe.size - recipe.region - margin;
    let top = rng.below(lo, hi + 1);
    let left = rng.below(lo, hi + 1);
    let image_seed = derive_seed(seed, &[id as u64]);
    let clean = synth_clean(image_seed, recipe.size, &target_params)?;
    let donor = synth_clean(derive_seed(image_seed, &[1]), recipe.size, &donor_params)?;
    let spec = ForgerySpec {
        region: Region::Rect {
            top,
            left,
            height: recipe.region,
            width: recipe.region,
        },
        offset: (0, 0),
        donor: donor_params,
    };
    let (forged, mask) = make_forgery(&clean, &donor, &spec)?;
    Ok(ForgedSample {
        id,
        clean,
        forged,
        mask,
        target_params,
        spec,
    })
}

/// Per-channel residual variance (8-bit units) at sampled and at
/// interpolated Bayer positions, pooled over channels.
pub fn bayer_variance_profile<T: Scalar>(image: &ImageTensor<T>, phase: u8) -> (f64, f64) {
    let (h, w) = (image.height(), image.width());
    let (mut s, mut sn, mut i, mut inn) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..image.channels().min(3) {
        for y in 0..h {
            for x in 0..w {
                let v = |dy: isize, dx: isize| {
                    image
                        .get(c, reflect_index(y as isize + dy, h), reflect_index(x as isize + dx, w))
                        .to_f64_lossy()
                        * 127.5
                };
                let r = v(0, 0) - 0.25 * (v(-1, 0) + v(1, 0) + v(0, -1) + v(0, 1));
                if bayer_channel(phase, y, x) == c {
                    s += r * r;
                    sn += 1;
                } else {
                    i += r * r;
                    inn += 1;
                }
            }
        }
    }
    (s / sn.max(1) as f64, i / inn.max(1) as f64)
}
