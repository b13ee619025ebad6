//! Fixed SRM high-pass filters producing the noise residual of a patch.

use crate::nn::Tensor;

/// Default truncation bound for residual values.
pub const SRM_Q: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SrmKernel {
    pub name: &'static str,
    pub size: usize,
    /// Row-major coefficients with the normalizer already applied.
    pub weights: Vec<f64>,
}

impl SrmKernel {
    fn new(name: &'static str, size: usize, coeffs: &[f64], norm: f64) -> Self {
        assert_eq!(coeffs.len(), size * size);
        Self {
            name,
            size,
            weights: coeffs.iter().map(|c| c / norm).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrmFilterBank {
    kernels: Vec<SrmKernel>,
    q: f64,
}

impl Default for SrmFilterBank {
    fn default() -> Self {
        Self::with_q(SRM_Q)
    }
}

impl SrmFilterBank {
    /// First-order, second-order and 5x5 KV filters, truncated at `q`.
    #[rustfmt::skip]
    pub fn with_q(q: f64) -> Self {
        let first = SrmKernel::new("first-order", 3, &[
            0.0, 0.0, 0.0,
            1.0, -2.0, 1.0,
            0.0, 0.0, 0.0,
        ], 2.0);
        let second = SrmKernel::new("second-order", 3, &[
            -1.0, 2.0, -1.0,
            2.0, -4.0, 2.0,
            -1.0, 2.0, -1.0,
        ], 4.0);
        let kv = SrmKernel::new("kv", 5, &[
            -1.0, 2.0, -2.0, 2.0, -1.0,
            2.0, -6.0, 8.0, -6.0, 2.0,
            -2.0, 8.0, -12.0, 8.0, -2.0,
            2.0, -6.0, 8.0, -6.0, 2.0,
            -1.0, 2.0, -2.0, 2.0, -1.0,
        ], 12.0);
        Self { kernels: vec![first, second, kv], q }
    }

    pub fn kernels(&self) -> &[SrmKernel] {
        &self.kernels
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Residual of a `3 x h x w` patch with values in `[0, 1]`: the RGB mean
    /// on the 8-bit scale is filtered by each kernel (reflect padding, same
    /// size) and clamped to `[-q, q]`. Output channel `k` belongs to kernel `k`.
    pub fn extract(&self, patch: &Tensor) -> Tensor {
        let (h, w) = (patch.shape()[1], patch.shape()[2]);
        let plane = h * w;
        let d = patch.data();
        let gray: Vec<f64> = (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0 * 255.0).collect();
        let mut out = vec![0.0; self.kernels.len() * plane];
        for (k, ker) in self.kernels.iter().enumerate() {
            let r = (ker.size / 2) as isize;
            assert!(h as isize > r && w as isize > r, "patch {h}x{w} too small for reflect padding");
            let dst = &mut out[k * plane..(k + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for i in 0..ker.size {
                        let yy = reflect(y as isize + i as isize - r, h);
                        for j in 0..ker.size {
                            let xx = reflect(x as isize + j as isize - r, w);
                            acc += ker.weights[i * ker.size + j] * gray[yy * w + xx];
                        }
                    }
                    dst[y * w + x] = acc.clamp(-self.q, self.q);
                }
            }
        }
        Tensor::new(&[self.kernels.len(), h, w], out).unwrap()
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(p: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, p, p], |_| rng.random::<f64>())
    }

    #[test]
    fn kernels_are_high_pass() {
        for k in SrmFilterBank::default().kernels() {
            assert!(k.weights.iter().sum::<f64>().abs() < 1e-12, "{}", k.name);
        }
    }

    #[test]
    fn constant_patch_gives_zero() {
        let r = SrmFilterBank::default().extract(&Tensor::full(&[3, 16, 16], 0.7));
        assert!(r.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_response_is_clamped_flipped_kernel() {
        let bank = SrmFilterBank::default();
        let p = 11;
        let mut t = Tensor::zeros(&[3, p, p]);
        for c in 0..3 {
            t.data_mut()[(c * p + 5) * p + 5] = 1.0;
        }
        let r = bank.extract(&t);
        for (k, ker) in bank.kernels().iter().enumerate() {
            let s = ker.size;
            let half = s / 2;
            for y in 0..p {
                for x in 0..p {
                    // Tap (i, j) reads pixel (y + i - half, x + j - half).
                    let i = 5 + half as isize - y as isize;
                    let j = 5 + half as isize - x as isize;
                    let inside = (0..s as isize).contains(&i) && (0..s as isize).contains(&j);
                    let want = if inside {
                        (255.0 * ker.weights[i as usize * s + j as usize]).clamp(-2.0, 2.0)
                    } else {
                        0.0
                    };
                    assert!((r.data()[(k * p + y) * p + x] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shift_equivariance_in_interior() {
        let bank = SrmFilterBank::default();
        let p = 20;
        let a = random_patch(p, 4);
        let b = Tensor::from_fn(&[3, p, p], |i| {
            let (c, y, x) = (i / (p * p), (i / p) % p, i % p);
            a.data()[(c * p + y.saturating_sub(1)) * p + x.saturating_sub(1)]
        });
        let (ra, rb) = (bank.extract(&a), bank.extract(&b));
        for k in 0..3 {
            for y in 3..p - 3 {
                for x in 3..p - 3 {
                    assert_eq!(rb.data()[(k * p + y + 1) * p + x + 1], ra.data()[(k * p + y) * p + x]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bounded_by_q(seed in any::<u64>(), q in 0.5f64..4.0) {
            let r = SrmFilterBank::with_q(q).extract(&random_patch(12, seed));
            prop_assert!(r.data().iter().all(|v| v.abs() <= q));
        }

        #[test]
        fn rejects_dc_offset(seed in any::<u64>(), shift in -0.05f64..0.05) {
            // Small-amplitude input keeps everything below the clamp.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(&[3, 10, 10], |_| 0.5 + 0.002 * rng.random::<f64>());
            let b = Tensor::from_fn(&[3, 10, 10], |i| a.data()[i] + shift);
            let bank = SrmFilterBank::default();
            prop_assert!(bank.extract(&a).max_abs_diff(&bank.extract(&b)) < 1e-9);
        }
    }
}
