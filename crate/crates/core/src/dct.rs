//! Orthonormal 8x8 DCT-II used by the block quantizer and the grid detector.

pub const BLOCK: usize = 8;

/// `basis[k][n] = c_k cos(pi (2n + 1) k / 16)`.
pub struct Dct8 {
    basis: [[f64; BLOCK]; BLOCK],
}

impl Default for Dct8 {
    fn default() -> Self {
        Self::new()
    }
}

impl Dct8 {
    pub fn new() -> Self {
        let mut basis = [[0.0; BLOCK]; BLOCK];
        for (k, row) in basis.iter_mut().enumerate() {
            let c = if k == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = c * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        Self { basis }
    }

    /// Forward transform of a row-major 8x8 block.
    pub fn forward(&self, block: &[f64; 64]) -> [f64; 64] {
        let mut tmp = [0.0; 64];
        for y in 0..BLOCK {
            for k in 0..BLOCK {
                let mut acc = 0.0;
                for n in 0..BLOCK {
                    acc += self.basis[k][n] * block[y * BLOCK + n];
                }
                tmp[y * BLOCK + k] = acc;
            }
        }
        let mut out = [0.0; 64];
        for kx in 0..BLOCK {
            for ky in 0..BLOCK {
                let mut acc = 0.0;
                for n in 0..BLOCK {
                    acc += self.basis[ky][n] * tmp[n * BLOCK + kx];
                }
                out[ky * BLOCK + kx] = acc;
            }
        }
        out
    }

    pub fn inverse(&self, coeffs: &[f64; 64]) -> [f64; 64] {
        let mut tmp = [0.0; 64];
        for ky in 0..BLOCK {
            for n in 0..BLOCK {
                let mut acc = 0.0;
                for k in 0..BLOCK {
                    acc += self.basis[k][n] * coeffs[ky * BLOCK + k];
                }
                tmp[ky * BLOCK + n] = acc;
            }
        }
        let mut out = [0.0; 64];
        for x in 0..BLOCK {
            for y in 0..BLOCK {
                let mut acc = 0.0;
                for k in 0..BLOCK {
                    acc += self.basis[k][y] * tmp[k * BLOCK + x];
                }
                out[y * BLOCK + x] = acc;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_energy() {
        let d = Dct8::new();
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 - 5.0;
        }
        let c = d.forward(&block);
        let back = d.inverse(&c);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let e1: f64 = block.iter().map(|v| v * v).sum();
        let e2: f64 = c.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-9);
    }

    #[test]
    fn constant_block_has_only_dc() {
        let d = Dct8::new();
        let c = d.forward(&[3.0; 64]);
        assert!((c[0] - 24.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
