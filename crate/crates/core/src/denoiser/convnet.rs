//! Small fully convolutional epsilon-predictor with hand-written backprop.
//!
//! Every layer is a 3x3 convolution with symmetric reflect padding; SiLU sits
//! between layers. The time step enters as one extra input channel filled
//! with `t / T`. Convolutions run as im2col followed by a GEMM.
//!
//! Buffers use a "batched planar" layout `[channel][sample][y][x]`, so a
//! batch of images is one wide matrix per layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageTensor, Shape};
use crate::scalar::Scalar;
use crate::seed::NoiseStream;

/// Output columns per inference strip; keeps the working set in cache.
const STRIP_COLUMNS: usize = 2048;
/// Layers with fewer outputs run as one tap-stacked GEMM plus shifted sums.
const NARROW_LAYER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerDesc {
    pub const KERNEL: usize = 3;

    pub const fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
        }
    }

    pub const fn fan_in(&self) -> usize {
        self.in_channels * Self::KERNEL * Self::KERNEL
    }

    pub const fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub const fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

/// Convolutional epsilon-predictor. Parameters are one flat vector: for each
/// layer, weights `[out][in][3][3]` followed by biases `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<T> {
    layers: Vec<LayerDesc>,
    params: Vec<T>,
    schedule_steps: usize,
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp_vec())
}

#[inline]
fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// Copies one image row shifted by `dx in {-1, 0, 1}` with reflection.
#[inline]
fn shifted_row<T: Scalar>(dst: &mut [T], src: &[T], dx: isize) {
    let w = src.len();
    match dx {
        0 => dst.copy_from_slice(src),
        -1 => {
            dst[0] = src[0];
            dst[1..].copy_from_slice(&src[..w - 1]);
        }
        1 => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = src[w - 1];
        }
        _ => unreachable!("3x3 kernels only"),
    }
}

/// Adjoint of [`shifted_row`]: accumulates `src` into `dst`.
#[inline]
fn shifted_row_adjoint<T: Scalar>(dst: &mut [T], src: &[T], dx: isize) {
    let w = dst.len();
    match dx {
        0 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
        -1 => {
            dst[0] += src[0];
            dst[..w - 1]
                .iter_mut()
                .zip(&src[1..])
                .for_each(|(d, &s)| *d += s);
        }
        1 => {
            dst[1..]
                .iter_mut()
                .zip(&src[..w - 1])
                .for_each(|(d, &s)| *d += s);
            dst[w - 1] += src[w - 1];
        }
        _ => unreachable!("3x3 kernels only"),
    }
}

/// Writes one output row: raw into an `h x w` plane for the last layer,
/// through SiLU into the interior of a padded plane otherwise.
#[inline]
fn store_row<T: Scalar>(next: &mut [T], row: &[T], co: usize, y: usize, h: usize, w: usize, is_last: bool) {
    if is_last {
        next[(co * h + y) * w..(co * h + y + 1) * w].copy_from_slice(row);
    } else {
        let pw = w + 2;
        let dst = &mut next[co * (h + 2) * pw + (y + 1) * pw + 1..][..w];
        for (o, &z) in dst.iter_mut().zip(row) {
            *o = silu(z);
        }
    }
}

/// Fills the one-pixel border of an `(h + 2) x (w + 2)` plane by symmetric
/// reflection of its interior.
fn fill_border<T: Scalar>(plane: &mut [T], h: usize, w: usize) {
    let pw = w + 2;
    for y in 1..=h {
        plane[y * pw] = plane[y * pw + 1];
        plane[y * pw + w + 1] = plane[y * pw + w];
    }
    plane.copy_within(pw..2 * pw, 0);
    plane.copy_within(h * pw..(h + 1) * pw, (h + 1) * pw);
}

/// Geometry of a batched planar buffer.
#[derive(Debug, Clone, Copy)]
struct Planes {
    samples: usize,
    height: usize,
    width: usize,
}

impl Planes {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn per_channel(&self) -> usize {
        self.samples * self.plane()
    }
}

/// im2col for rows `y0..y1` of every sample.
///
/// Output is `[cin * 9][samples * (y1 - y0) * width]`.
fn im2col<T: Scalar>(act: &[T], cin: usize, g: Planes, y0: usize, y1: usize, col: &mut [T]) {
    let rows = y1 - y0;
    let w = g.width;
    let ncols = g.samples * rows * w;
    debug_assert_eq!(col.len(), cin * 9 * ncols);
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ci * 9 + ky * 3 + kx) * ncols;
                for b in 0..g.samples {
                    let src_plane = &act[(ci * g.samples + b) * g.plane()..][..g.plane()];
                    for y in y0..y1 {
                        let sy = reflect_index(y as isize + ky as isize - 1, g.height);
                        let src = &src_plane[sy * w..(sy + 1) * w];
                        let off = r + (b * rows + (y - y0)) * w;
                        shifted_row(&mut col[off..off + w], src, kx as isize - 1);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] over all rows.
fn col2im<T: Scalar>(col: &[T], cin: usize, g: Planes, act: &mut [T]) {
    let w = g.width;
    let ncols = g.per_channel();
    act.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ci * 9 + ky * 3 + kx) * ncols;
                for b in 0..g.samples {
                    let plane_off = (ci * g.samples + b) * g.plane();
                    for y in 0..g.height {
                        let sy = reflect_index(y as isize + ky as isize - 1, g.height);
                        let off = r + (b * g.height + y) * w;
                        let dst = &mut act[plane_off + sy * w..plane_off + (sy + 1) * w];
                        shifted_row_adjoint(dst, &col[off..off + w], kx as isize - 1);
                    }
                }
            }
        }
    }
}

/// Intermediate values kept by a training forward pass.
struct Trace<T> {
    cols: Vec<Vec<T>>,
    pre_acts: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T: Scalar> ConvNet<T> {
    /// Randomly initialized network: weights and biases uniform in
    /// `[-a, a]`, `a = sqrt(1 / fan_in)`.
    pub fn new(layers: Vec<LayerDesc>, schedule_steps: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layers, schedule_steps)?;
        let mut rng = NoiseStream::derived(seed, &[0xC0_4E]);
        let mut off = 0;
        for d in net.layers.clone() {
            let a = (1.0 / d.fan_in() as f64).sqrt();
            for p in &mut net.params[off..off + d.param_len()] {
                *p = T::lit(a * (2.0 * rng.uniform() - 1.0));
            }
            off += d.param_len();
        }
        Ok(net)
    }

    pub fn zeros(layers: Vec<LayerDesc>, schedule_steps: usize) -> Result<Self> {
        Self::validate_layers(&layers)?;
        if schedule_steps == 0 {
            return Err(Error::param("schedule_steps must be positive"));
        }
        let n = layers.iter().map(LayerDesc::param_len).sum();
        Ok(Self {
            layers,
            params: vec![T::zero(); n],
            schedule_steps,
        })
    }

    pub fn from_params(layers: Vec<LayerDesc>, schedule_steps: usize, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(layers, schedule_steps)?;
        if params.len() != net.params.len() {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network weight".into()));
        }
        net.params = params;
        Ok(net)
    }

    /// `channels + 1 -> hidden -> hidden -> hidden -> channels`.
    pub fn standard_layers(channels: usize, hidden: usize) -> Vec<LayerDesc> {
        vec![
            LayerDesc::new(channels + 1, hidden),
            LayerDesc::new(hidden, hidden),
            LayerDesc::new(hidden, hidden),
            LayerDesc::new(hidden, channels),
        ]
    }

    fn validate_layers(layers: &[LayerDesc]) -> Result<()> {
        let (first, last) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::param("network needs at least one layer")),
        };
        if layers.iter().any(|d| d.in_channels == 0 || d.out_channels == 0) {
            return Err(Error::param("layer with zero channels"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::param("consecutive layers disagree on channel count"));
            }
        }
        if first.in_channels != last.out_channels + 1 {
            return Err(Error::param(
                "first layer must take image channels plus one time channel",
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn schedule_steps(&self) -> usize {
        self.schedule_steps
    }

    pub fn image_channels(&self) -> usize {
        self.layers.last().map_or(0, |d| d.out_channels)
    }

    fn layer_params(&self, index: usize) -> (&[T], &[T]) {
        let off: usize = self.layers[..index].iter().map(LayerDesc::param_len).sum();
        let d = self.layers[index];
        let w = &self.params[off..off + d.weight_len()];
        let b = &self.params[off + d.weight_len()..off + d.param_len()];
        (w, b)
    }

    fn time_value(&self, t: usize) -> T {
        T::lit(t as f64 / self.schedule_steps as f64)
    }

    fn check_input(&self, x: &ImageTensor<T>) -> Result<()> {
        if x.channels() != self.image_channels() {
            return Err(Error::shape(format!(
                "network expects {} channels, image has {}",
                self.image_channels(),
                x.channels()
            )));
        }
        if x.is_empty() {
            return Err(Error::shape("empty image"));
        }
        Ok(())
    }

    /// Batched planar input: image channels then the time channel.
    fn assemble_input(&self, batch: &[(&ImageTensor<T>, usize)]) -> Vec<T> {
        let shape = batch[0].0.shape();
        let (c, p, n) = (shape.channels, shape.plane(), batch.len());
        let mut input = vec![T::zero(); (c + 1) * n * p];
        for (b, (img, t)) in batch.iter().enumerate() {
            for ch in 0..c {
                input[(ch * n + b) * p..][..p].copy_from_slice(img.channel(ch));
            }
            let tv = self.time_value(*t);
            input[(c * n + b) * p..][..p].iter_mut().for_each(|v| *v = tv);
        }
        input
    }

    /// Predicted noise for one image at step `t`.
    pub fn forward(&self, x: &ImageTensor<T>, t: usize) -> Result<ImageTensor<T>> {
        self.check_input(x)?;
        let shape = x.shape();
        let (h, w) = (shape.height, shape.width);
        let pw = w + 2;
        let pplane = (h + 2) * pw;
        let input = self.assemble_input(&[(x, t)]);
        let mut act = vec![T::zero(); (shape.channels + 1) * pplane];
        for (ci, plane) in input.chunks_exact(shape.plane()).enumerate() {
            let dst = &mut act[ci * pplane..(ci + 1) * pplane];
            for y in 0..h {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
            }
            fill_border(dst, h, w);
        }
        let last = self.layers.len() - 1;
        let rows_per_strip = (STRIP_COLUMNS / pw).clamp(1, h);
        let mut scratch = Vec::new();
        let mut output = Vec::new();
        for (li, d) in self.layers.iter().enumerate() {
            let (weight, bias) = self.layer_params(li);
            let is_last = li == last;
            let mut next = if is_last {
                vec![T::zero(); d.out_channels * h * w]
            } else {
                vec![T::zero(); d.out_channels * pplane]
            };
            if d.out_channels < NARROW_LAYER {
                self.narrow_layer(li, &act, h, w, rows_per_strip, &mut scratch, &mut next, is_last);
            } else {
                let mut y0 = 0;
                while y0 < h {
                    let y1 = (y0 + rows_per_strip).min(h);
                    let span = (y1 - y0) * pw;
                    scratch.resize(d.out_channels * span, T::zero());
                    for (co, &b) in bias.iter().enumerate() {
                        scratch[co * span..(co + 1) * span].iter_mut().for_each(|v| *v = b);
                    }
                    // one GEMM per kernel tap over the padded activations; the
                    // two columns past each row's end are scratch and discarded
                    for ky in 0..3 {
                        for kx in 0..3 {
                            T::gemm(
                                d.out_channels,
                                d.in_channels,
                                span - 2,
                                T::one(),
                                &weight[ky * 3 + kx..],
                                (d.fan_in(), 9),
                                &act[(y0 + ky) * pw + kx..],
                                (pplane, 1),
                                T::one(),
                                &mut scratch,
                                (span, 1),
                            );
                        }
                    }
                    for co in 0..d.out_channels {
                        let src = &scratch[co * span..(co + 1) * span];
                        for y in y0..y1 {
                            let row = &src[(y - y0) * pw..(y - y0) * pw + w];
                            store_row(&mut next, row, co, y, h, w, is_last);
                        }
                    }
                    y0 = y1;
                }
            }
            if is_last {
                output = next;
            } else {
                for plane in next.chunks_exact_mut(pplane) {
                    fill_border(plane, h, w);
                }
                act = next;
            }
        }
        ImageTensor::new(shape, output)
    }

    /// Layer with few output channels: `P[tap][co] = W_tap * act` over the
    /// padded strip in one GEMM, then `out = bias + sum_tap shift_tap(P)`.
    #[allow(clippy::too_many_arguments)]
    fn narrow_layer(
        &self,
        li: usize,
        act: &[T],
        h: usize,
        w: usize,
        rows_per_strip: usize,
        scratch: &mut Vec<T>,
        next: &mut [T],
        is_last: bool,
    ) {
        let d = self.layers[li];
        let (weight, bias) = self.layer_params(li);
        let (pw, pplane) = (w + 2, (h + 2) * (w + 2));
        let m = 9 * d.out_channels;
        let mut stacked = vec![T::zero(); m * d.in_channels];
        for co in 0..d.out_channels {
            for ci in 0..d.in_channels {
                for tap in 0..9 {
                    stacked[(tap * d.out_channels + co) * d.in_channels + ci] =
                        weight[co * d.fan_in() + ci * 9 + tap];
                }
            }
        }
        let mut row = vec![T::zero(); w];
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + rows_per_strip).min(h);
            let span = (y1 - y0 + 2) * pw;
            scratch.resize(m * span, T::zero());
            T::gemm(
                m,
                d.in_channels,
                span,
                T::one(),
                &stacked,
                (d.in_channels, 1),
                &act[y0 * pw..],
                (pplane, 1),
                T::zero(),
                scratch,
                (span, 1),
            );
            for co in 0..d.out_channels {
                for y in y0..y1 {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                    for tap in 0..9 {
                        let (ky, kx) = (tap / 3, tap % 3);
                        let off = (tap * d.out_channels + co) * span + (y - y0 + ky) * pw + kx;
                        for (r, &p) in row.iter_mut().zip(&scratch[off..off + w]) {
                            *r += p;
                        }
                    }
                    store_row(next, &row, co, y, h, w, is_last);
                }
            }
            y0 = y1;
        }
    }

    fn forward_trace(&self, batch: &[(&ImageTensor<T>, usize)]) -> Trace<T> {
        let shape = batch[0].0.shape();
        let g = Planes {
            samples: batch.len(),
            height: shape.height,
            width: shape.width,
        };
        let ncols = g.per_channel();
        let mut act = self.assemble_input(batch);
        let last = self.layers.len() - 1;
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(last);
        for (li, d) in self.layers.iter().enumerate() {
            let (weight, bias) = self.layer_params(li);
            let mut col = vec![T::zero(); d.fan_in() * ncols];
            im2col(&act, d.in_channels, g, 0, g.height, &mut col);
            let mut z = vec![T::zero(); d.out_channels * ncols];
            for (co, b) in bias.iter().enumerate() {
                z[co * ncols..(co + 1) * ncols].iter_mut().for_each(|v| *v = *b);
            }
            T::gemm(
                d.out_channels,
                d.fan_in(),
                ncols,
                T::one(),
                weight,
                (d.fan_in(), 1),
                &col,
                (ncols, 1),
                T::one(),
                &mut z,
                (ncols, 1),
            );
            cols.push(col);
            if li == last {
                act = z;
            } else {
                act = z.iter().map(|&v| silu(v)).collect();
                pre_acts.push(z);
            }
        }
        Trace {
            cols,
            pre_acts,
            output: act,
        }
    }

    /// Mean squared error between predicted and true noise over a batch,
    /// and its gradient with respect to the flat parameter vector.
    ///
    /// `batch[i] = (x_t, t, eps)`; all images share one shape.
    pub fn loss_and_gradient(
        &self,
        batch: &[(&ImageTensor<T>, usize, &ImageTensor<T>)],
    ) -> Result<(f64, Vec<T>)> {
        let first = batch
            .first()
            .ok_or_else(|| Error::param("empty training batch"))?;
        let shape = first.0.shape();
        for (x, _, e) in batch {
            self.check_input(x)?;
            if x.shape() != shape || e.shape() != shape {
                return Err(Error::shape("training batch with mixed shapes"));
            }
        }
        let inputs: Vec<(&ImageTensor<T>, usize)> = batch.iter().map(|(x, t, _)| (*x, *t)).collect();
        let trace = self.forward_trace(&inputs);
        let g = Planes {
            samples: batch.len(),
            height: shape.height,
            width: shape.width,
        };
        let ncols = g.per_channel();
        let p = g.plane();
        let count = (batch.len() * shape.len()) as f64;

        // d loss / d output, laid out [channel][sample][pixel]
        let scale = T::lit(2.0 / count);
        let mut loss = 0.0f64;
        let mut delta = vec![T::zero(); trace.output.len()];
        for ch in 0..shape.channels {
            for (b, (_, _, eps)) in batch.iter().enumerate() {
                let off = (ch * g.samples + b) * p;
                let target = eps.channel(ch);
                for i in 0..p {
                    let r = trace.output[off + i] - target[i];
                    loss += r.to_f64_lossy().powi(2);
                    delta[off + i] = scale * r;
                }
            }
        }
        loss /= count;

        let mut grad = vec![T::zero(); self.params.len()];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, d| {
                let o = *acc;
                *acc += d.param_len();
                Some(o)
            })
            .collect();
        let mut dcol = Vec::new();
        for li in (0..self.layers.len()).rev() {
            let d = self.layers[li];
            let (weight, _) = self.layer_params(li);
            let (gw, gb) = grad[offsets[li]..offsets[li] + d.param_len()].split_at_mut(d.weight_len());
            // dW = dZ * col^T
            T::gemm(
                d.out_channels,
                ncols,
                d.fan_in(),
                T::one(),
                &delta,
                (ncols, 1),
                &trace.cols[li],
                (1, ncols),
                T::zero(),
                gw,
                (d.fan_in(), 1),
            );
            for (co, b) in gb.iter_mut().enumerate() {
                *b = delta[co * ncols..(co + 1) * ncols].iter().copied().sum();
            }
            if li == 0 {
                break;
            }
            // dCol = W^T * dZ, then scatter back to activations
            dcol.resize(d.fan_in() * ncols, T::zero());
            T::gemm(
                d.fan_in(),
                d.out_channels,
                ncols,
                T::one(),
                weight,
                (1, d.fan_in()),
                &delta,
                (ncols, 1),
                T::zero(),
                &mut dcol,
                (ncols, 1),
            );
            let mut dact = vec![T::zero(); d.in_channels * ncols];
            col2im(&dcol, d.in_channels, g, &mut dact);
            let z = &trace.pre_acts[li - 1];
            for (da, &zv) in dact.iter_mut().zip(z) {
                *da *= silu_grad(zv);
            }
            delta = dact;
        }
        Ok((loss, grad))
    }
}

/// Shape check helper used by [`super::Denoiser`].
pub(crate) fn expects_channels(net_channels: usize, shape: Shape) -> Result<()> {
    if shape.channels != net_channels {
        return Err(Error::shape(format!(
            "network expects {net_channels} channels, image has {}",
            shape.channels
        )));
    }
    Ok(())
}
