//! Seed derivation and Gaussian noise streams.
//!
//! Every random draw in the library comes from a [`NoiseStream`] whose seed
//! is derived from a root seed and a path of integer labels (image id, patch
//! index, ...). The derivation is SplitMix64 finalization folded over the
//! labels, and the stream itself is ChaCha8; both are stable across runs,
//! platforms and thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::{ImageTensor, Shape};
use crate::scalar::Scalar;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `hash(root, labels...)`.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    let mut h = mix(root.wrapping_add(GOLDEN));
    for &l in labels {
        h = mix(h ^ mix(l.wrapping_add(GOLDEN)).wrapping_add(GOLDEN));
    }
    h
}

/// Sequential random stream (uniforms and standard normals).
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derived(root: u64, labels: &[u64]) -> Self {
        Self::new(derive_seed(root, labels))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `lo..hi`.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for v in out {
            *v = T::lit(self.normal());
        }
    }

    pub fn normal_image<T: Scalar>(&mut self, shape: Shape) -> ImageTensor<T> {
        let mut img = ImageTensor::zeros(shape);
        self.fill_normal(img.data_mut());
        img
    }
}
