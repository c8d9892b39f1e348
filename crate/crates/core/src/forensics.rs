//! Trace detectors producing per-pixel heatmaps in `[0, 1]`.
//!
//! All three work on sliding windows, score each window against the image's
//! global (majority) behavior and upsample the window scores bilinearly to
//! pixel resolution.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dct::{Dct8, BLOCK};
use crate::error::{Error, Result};
use crate::forgerylab::bayer_channel;
use crate::image::{reflect_index, ImageTensor};
use crate::scalar::Scalar;

/// A DCT coefficient counts as zero below this magnitude (8-bit units).
pub const NULL_COEFF_THRESHOLD: f64 = 0.5;
pub const GRID_WINDOW: usize = 32;
pub const LOCAL_WINDOW: usize = 32;
pub const WINDOW_STRIDE: usize = 8;
/// Vote margins below this many null coefficients per block are damped.
pub const GRID_MIN_GAP: f64 = 6.0;
/// Bayer phase scores below this relative contrast are damped.
pub const PHASE_MIN_CONTRAST: f64 = 0.3;
/// Relative noise-level deviations below this read as authentic.
pub const RESIDUAL_MIN_DEVIATION: f64 = 0.3;

/// Per-pixel forgery likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> HeatMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "heatmap data length {} for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::param("heat values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Grid,
    Variance,
    Residual,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::Grid, Detector::Variance, Detector::Residual];

    pub fn name(&self) -> &'static str {
        match self {
            Detector::Grid => "grid",
            Detector::Variance => "variance",
            Detector::Residual => "residual",
        }
    }

    pub fn run<T: Scalar>(&self, image: &ImageTensor<T>) -> Result<HeatMap<T>> {
        match self {
            Detector::Grid => detect_grid(image),
            Detector::Variance => detect_variance(image),
            Detector::Residual => detect_residual(image),
        }
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grid" => Ok(Detector::Grid),
            "variance" => Ok(Detector::Variance),
            "residual" => Ok(Detector::Residual),
            other => Err(Error::param(format!("unknown detector '{other}'"))),
        }
    }
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Window start positions covering `0..n` with the given stride; the last
/// window is flush with the border.
fn window_starts(n: usize, win: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n - win).step_by(stride).collect();
    if *v.last().expect("n >= win") != n - win {
        v.push(n - win);
    }
    v
}

/// Interpolation weights of pixel `p` between window centers.
fn bracket(centers: &[f64], p: f64) -> (usize, usize, f64) {
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    let last = centers.len() - 1;
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= p) - 1;
    let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, t)
}

/// Bilinear upsampling of window scores to an `h x w` heatmap.
fn upsample<T: Scalar>(scores: &[f64], ys: &[usize], xs: &[usize], win: usize, h: usize, w: usize) -> HeatMap<T> {
    let half = win as f64 / 2.0 - 0.5;
    let cy: Vec<f64> = ys.iter().map(|&y| y as f64 + half).collect();
    let cx: Vec<f64> = xs.iter().map(|&x| x as f64 + half).collect();
    let bx: Vec<_> = (0..w).map(|x| bracket(&cx, x as f64)).collect();
    let nx = xs.len();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, ty) = bracket(&cy, y as f64);
        for &(x0, x1, tx) in &bx {
            let s = |a: usize, b: usize| scores[a * nx + b];
            let top = s(y0, x0) * (1.0 - tx) + s(y0, x1) * tx;
            let bottom = s(y1, x0) * (1.0 - tx) + s(y1, x1) * tx;
            data.push(T::lit((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0)));
        }
    }
    HeatMap { height: h, width: w, data }
}

/// Index of the most frequent value; ties go to the smallest index.
fn majority(votes: &[usize], n: usize) -> usize {
    let mut counts = vec![0usize; n];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Argmax with ties resolved to the smallest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Lead of the best candidate score over the median candidate score.
fn lead(s: &[f64]) -> f64 {
    let mut sorted = s.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = 0.5 * (sorted[(n - 1) / 2] + sorted[n / 2]);
    sorted[n - 1] - median
}

/// Majority vote over the windows whose lead reaches `min_lead`; `None`
/// when no window carries a clear trace.
fn confident_majority(profiles: &[Vec<f64>], n: usize, min_lead: f64) -> Option<usize> {
    let votes: Vec<usize> = profiles
        .iter()
        .filter(|s| lead(s) >= min_lead)
        .map(|s| argmax(s))
        .collect();
    (!votes.is_empty()).then(|| majority(&votes, n))
}

/// Heat of a window whose candidate scores are `s`, given the global choice.
///
/// 0 unless the window's own best candidate leads the median by `min_lead`
/// (no clear trace reads as authentic); otherwise `(best - s[major]) / lead`,
/// clipped to `[0, 1]`.
fn margin_heat(s: &[f64], major: usize, min_lead: f64) -> f64 {
    let l = lead(s);
    if l < min_lead || l <= 0.0 {
        return 0.0;
    }
    let best = s[argmax(s)];
    ((best - s[major]) / l).clamp(0.0, 1.0)
}

/// Null AC coefficient counts of every 8x8 block, indexed by its top-left
/// pixel and averaged over the color channels.
fn null_counts<T: Scalar>(image: &ImageTensor<T>) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let dct = Dct8::new();
    let (bh, bw) = (h + 1 - BLOCK, w + 1 - BLOCK);
    let mut counts = vec![0.0; bh * bw];
    let mut block = [0.0; 64];
    for ch in 0..image.channels() {
        let p = channel_u8(image, ch);
        for y in 0..bh {
            for x in 0..bw {
                for r in 0..BLOCK {
                    block[r * BLOCK..(r + 1) * BLOCK].copy_from_slice(&p[(y + r) * w + x..(y + r) * w + x + BLOCK]);
                }
                let c = dct.forward(&block);
                counts[y * bw + x] += c[1..].iter().filter(|v| v.abs() < NULL_COEFF_THRESHOLD).count() as f64;
            }
        }
    }
    let k = 1.0 / image.channels() as f64;
    counts.iter_mut().for_each(|v| *v *= k);
    counts
}

/// JPEG-grid consistency detector.
///
/// Each 32x32 window votes for the 8x8 grid origin whose blocks contain the
/// most null DCT coefficients. Windows disagreeing with the majority origin
/// receive heat proportional to their vote margin; windows whose best origin
/// leads by less than [`GRID_MIN_GAP`] count as authentic.
pub fn detect_grid<T: Scalar>(image: &ImageTensor<T>) -> Result<HeatMap<T>> {
    let (h, w) = (image.height(), image.width());
    if h < GRID_WINDOW || w < GRID_WINDOW {
        return Err(Error::Size(format!(
            "grid detector needs at least {GRID_WINDOW}x{GRID_WINDOW}, got {h}x{w}"
        )));
    }
    let counts = null_counts(image);
    let bw = w + 1 - BLOCK;
    let ys = window_starts(h, GRID_WINDOW, WINDOW_STRIDE);
    let xs = window_starts(w, GRID_WINDOW, WINDOW_STRIDE);
    let mut profiles = Vec::with_capacity(ys.len() * xs.len());
    for &wy in &ys {
        for &wx in &xs {
            let mut s = vec![0.0; BLOCK * BLOCK];
            for (o, score) in s.iter_mut().enumerate() {
                let (oy, ox) = (o / BLOCK, o % BLOCK);
                let first_y = wy + (oy + BLOCK - wy % BLOCK) % BLOCK;
                let first_x = wx + (ox + BLOCK - wx % BLOCK) % BLOCK;
                let (mut total, mut n) = (0.0, 0u32);
                let mut by = first_y;
                while by + BLOCK <= wy + GRID_WINDOW {
                    let mut bx = first_x;
                    while bx + BLOCK <= wx + GRID_WINDOW {
                        total += counts[by * bw + bx];
                        n += 1;
                        bx += BLOCK;
                    }
                    by += BLOCK;
                }
                *score = total / n as f64;
            }
            profiles.push(s);
        }
    }
    let min_lead = GRID_MIN_GAP;
    let Some(major) = confident_majority(&profiles, BLOCK * BLOCK, min_lead) else {
        return Ok(HeatMap::zeros(h, w));
    };
    let scores: Vec<f64> = profiles.iter().map(|s| margin_heat(s, major, min_lead)).collect();
    Ok(upsample(&scores, &ys, &xs, GRID_WINDOW, h, w))
}

/// Reflect-padded Laplacian residual `x - mean(4-neighbours)` of one channel.
fn laplacian_residual(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let up = reflect_index(y as isize - 1, h);
        let down = reflect_index(y as isize + 1, h);
        for x in 0..w {
            let left = reflect_index(x as isize - 1, w);
            let right = reflect_index(x as isize + 1, w);
            out[y * w + x] = plane[y * w + x]
                - 0.25 * (plane[up * w + x] + plane[down * w + x] + plane[y * w + left] + plane[y * w + right]);
        }
    }
    out
}

fn channel_u8<T: Scalar>(image: &ImageTensor<T>, c: usize) -> Vec<f64> {
    image.channel(c).iter().map(|v| (v.to_f64_lossy() + 1.0) * 127.5).collect()
}

/// Demosaicing-phase consistency detector.
///
/// In each 32x32 window the residual energy of every channel is measured on
/// the four 2x2 phases; the Bayer layout whose sampled sites carry the most
/// energy is the window's vote. Channels beyond the third are ignored;
/// single-channel images use their only channel for all three colors.
pub fn detect_variance<T: Scalar>(image: &ImageTensor<T>) -> Result<HeatMap<T>> {
    let (h, w) = (image.height(), image.width());
    let win = LOCAL_WINDOW.min(h).min(w);
    let residuals: Vec<Vec<f64>> = (0..3)
        .map(|c| laplacian_residual(&channel_u8(image, c.min(image.channels() - 1)), h, w))
        .collect();
    let ys = window_starts(h, win, WINDOW_STRIDE);
    let xs = window_starts(w, win, WINDOW_STRIDE);
    let mut profiles = Vec::with_capacity(ys.len() * xs.len());
    for &wy in &ys {
        for &wx in &xs {
            // energy[c][phase site]
            let mut energy = [[0.0f64; 4]; 3];
            let mut n = [0usize; 4];
            for y in wy..wy + win {
                for x in wx..wx + win {
                    let site = (y & 1) * 2 + (x & 1);
                    n[site] += 1;
                    for c in 0..3 {
                        let r = residuals[c][y * w + x];
                        energy[c][site] += r * r;
                    }
                }
            }
            for c in 0..3 {
                for s in 0..4 {
                    energy[c][s] /= n[s].max(1) as f64;
                }
            }
            let total: f64 = energy.iter().flatten().sum();
            let mut s = [0.0; 4];
            if total > 0.0 {
                for (phase, score) in s.iter_mut().enumerate() {
                    let (mut on, mut off) = (0.0, 0.0);
                    for c in 0..3 {
                        for site in 0..4 {
                            let e = energy[c][site];
                            if bayer_channel(phase as u8, site >> 1, site & 1) == c {
                                on += e;
                            } else {
                                off += e;
                            }
                        }
                    }
                    // sampled: 1 of 4 sites for R/B, 2 for G; normalize to mean energies
                    *score = (on / 4.0 - off / 8.0) / (total / 12.0);
                }
            }
            profiles.push(s.to_vec());
        }
    }
    let min_lead = PHASE_MIN_CONTRAST;
    let Some(major) = confident_majority(&profiles, 4, min_lead) else {
        return Ok(HeatMap::zeros(h, w));
    };
    let scores: Vec<f64> = profiles.iter().map(|s| margin_heat(s, major, min_lead)).collect();
    Ok(upsample(&scores, &ys, &xs, win, h, w))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len();
    let mid = n / 2;
    let (lo, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// Noise-level consistency detector.
///
/// Noise std per 32x32 window is estimated as `1.4826 * MAD` of a
/// second-order residual (normalized to unit gain on white noise); heat is
/// the relative deviation from the median window estimate, clipped to 1 and
/// zeroed below [`RESIDUAL_MIN_DEVIATION`].
pub fn detect_residual<T: Scalar>(image: &ImageTensor<T>) -> Result<HeatMap<T>> {
    let (h, w) = (image.height(), image.width());
    let win = LOCAL_WINDOW.min(h).min(w);
    let mut residuals = Vec::with_capacity(image.channels());
    for c in 0..image.channels() {
        let p = channel_u8(image, c);
        let mut r = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = |dy: isize, dx: isize| {
                    p[reflect_index(y as isize + dy, h) * w + reflect_index(x as isize + dx, w)]
                };
                let mut acc = 0.0;
                for (dy, ky) in [(-1, 1.0), (0, -2.0), (1, 1.0)] {
                    for (dx, kx) in [(-1, 1.0), (0, -2.0), (1, 1.0)] {
                        acc += ky * kx * v(dy, dx);
                    }
                }
                r[y * w + x] = acc / 6.0;
            }
        }
        residuals.push(r);
    }
    let ys = window_starts(h, win, WINDOW_STRIDE);
    let xs = window_starts(w, win, WINDOW_STRIDE);
    let mut sigmas = Vec::with_capacity(ys.len() * xs.len());
    let mut buf = Vec::with_capacity(win * win * image.channels());
    for &wy in &ys {
        for &wx in &xs {
            buf.clear();
            for r in &residuals {
                for y in wy..wy + win {
                    buf.extend_from_slice(&r[y * w + wx..y * w + wx + win]);
                }
            }
            let med = median(&mut buf);
            buf.iter_mut().for_each(|v| *v = (*v - med).abs());
            sigmas.push(1.4826 * median(&mut buf));
        }
    }
    let global = median(&mut sigmas.clone());
    if global <= 0.0 {
        return Ok(HeatMap::zeros(h, w));
    }
    let scores: Vec<f64> = sigmas
        .iter()
        .map(|s| {
            let d = (s - global).abs() / global;
            if d < RESIDUAL_MIN_DEVIATION { 0.0 } else { d.min(1.0) }
        })
        .collect();
    Ok(upsample(&scores, &ys, &xs, win, h, w))
}
