//! Richest-patch selection by GLCM homogeneity.
//!
//! An image is tiled into non-overlapping `p x p` patches. Each patch is
//! scored by the homogeneity of its gray-level co-occurrence matrices, and the
//! least homogeneous (most textured) patch wins. Ties go to the first patch
//! in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Patch sizes that tile a 224 x 224 image.
pub const VALID_PATCH_SIZES: [usize; 6] = [16, 28, 32, 56, 112, 224];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlcmParams {
    pub levels: usize,
    /// `(dy, dx)` pixel offsets; each yields one co-occurrence matrix.
    pub offsets: Vec<(usize, usize)>,
}

impl Default for GlcmParams {
    fn default() -> Self {
        Self {
            levels: 8,
            offsets: vec![(0, 1), (1, 0)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub p: usize,
    /// `3 x p x p` tiles in row-major order.
    pub patches: Vec<Tensor>,
    /// Pixel `(row, col)` of each tile's top-left corner.
    pub coords: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// Stitches the tiles back into a `3 x h x w` image.
    pub fn reassemble(&self, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(&[3, h, w]);
        for (patch, &(r, c)) in self.patches.iter().zip(&self.coords) {
            paste(&mut out, patch, r, c);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RichestPatch {
    pub pixels: Tensor,
    pub homogeneity: f64,
    pub coords: (usize, usize),
    /// Row-major tile index.
    pub index: usize,
}

/// Checks that `p` tiles an image with sides `h` and `w`.
pub fn check_patch_size(p: usize, h: usize, w: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "patch size {p} does not tile a {h}x{w} image (valid for 224: {VALID_PATCH_SIZES:?})"
        )));
    }
    Ok(())
}

pub fn split_patches(image: &Tensor, p: usize) -> Result<PatchGrid> {
    let (h, w) = image_hw(image)?;
    check_patch_size(p, h, w)?;
    let mut grid = PatchGrid {
        p,
        patches: Vec::new(),
        coords: Vec::new(),
    };
    for r in (0..h).step_by(p) {
        for c in (0..w).step_by(p) {
            grid.patches.push(crop(image, r, c, p));
            grid.coords.push((r, c));
        }
    }
    Ok(grid)
}

/// Copies the `3 x p x p` window whose top-left corner is `(row, col)`.
pub fn crop(image: &Tensor, row: usize, col: usize, p: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    assert!(row + p <= h && col + p <= w, "crop outside image");
    let d = image.data();
    let mut out = Vec::with_capacity(3 * p * p);
    for ch in 0..3 {
        for y in row..row + p {
            let start = (ch * h + y) * w + col;
            out.extend_from_slice(&d[start..start + p]);
        }
    }
    Tensor::new(&[3, p, p], out).unwrap()
}

fn paste(dst: &mut Tensor, patch: &Tensor, row: usize, col: usize) {
    let (h, w) = (dst.shape()[1], dst.shape()[2]);
    let p = patch.shape()[1];
    let d = dst.data_mut();
    for ch in 0..3 {
        for y in 0..p {
            let at = (ch * h + row + y) * w + col;
            d[at..at + p].copy_from_slice(&patch.data()[(ch * p + y) * p..(ch * p + y + 1) * p]);
        }
    }
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape(format!("expected a 3 x h x w image, got {s:?}"))),
    }
}

/// Rec.601 luminance quantized to `levels` bins, row-major `h x w`.
fn quantize(image: &Tensor, levels: usize) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let d = image.data();
    (0..plane)
        .map(|i| {
            let g = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
            ((g.clamp(0.0, 1.0) * levels as f64).floor() as usize).min(levels - 1) as u8
        })
        .collect()
}

/// Symmetric normalized co-occurrence matrix (`levels x levels`, row-major)
/// of the window `[row, row+p) x [col, col+p)` in a quantized plane.
fn glcm_window(q: &[u8], w: usize, row: usize, col: usize, p: usize, levels: usize, (dy, dx): (usize, usize)) -> Vec<f64> {
    let mut m = vec![0.0; levels * levels];
    if dy >= p || dx >= p {
        return m;
    }
    let mut total = 0.0;
    for y in row..row + p - dy {
        for x in col..col + p - dx {
            let a = q[y * w + x] as usize;
            let b = q[(y + dy) * w + x + dx] as usize;
            m[a * levels + b] += 1.0;
            m[b * levels + a] += 1.0;
            total += 2.0;
        }
    }
    m.iter_mut().for_each(|v| *v /= total);
    m
}

fn homogeneity_of(m: &[f64], levels: usize) -> f64 {
    let mut h = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            h += m[i * levels + j] / (1.0 + i.abs_diff(j) as f64);
        }
    }
    h
}

fn window_score(q: &[u8], w: usize, row: usize, col: usize, p: usize, params: &GlcmParams) -> f64 {
    let total: f64 = params
        .offsets
        .iter()
        .map(|&off| homogeneity_of(&glcm_window(q, w, row, col, p, params.levels, off), params.levels))
        .sum();
    total / params.offsets.len() as f64
}

/// Co-occurrence matrices of a `3 x p x p` patch, one per offset.
pub fn glcm_matrices(patch: &Tensor, params: &GlcmParams) -> Vec<Vec<f64>> {
    let (h, w) = (patch.shape()[1], patch.shape()[2]);
    assert_eq!(h, w, "patches are square");
    let q = quantize(patch, params.levels);
    params
        .offsets
        .iter()
        .map(|&off| glcm_window(&q, w, 0, 0, h, params.levels, off))
        .collect()
}

/// Mean over offsets of `sum_ij P(i,j) / (1 + |i - j|)`; lies in `(0, 1]`.
pub fn glcm_homogeneity(patch: &Tensor, params: &GlcmParams) -> f64 {
    let p = patch.shape()[1];
    let q = quantize(patch, params.levels);
    window_score(&q, patch.shape()[2], 0, 0, p, params)
}

/// Homogeneity of every tile, row-major.
pub fn patch_scores(image: &Tensor, p: usize, params: &GlcmParams) -> Result<Vec<f64>> {
    let (h, w) = image_hw(image)?;
    check_patch_size(p, h, w)?;
    let q = quantize(image, params.levels);
    let mut scores = Vec::with_capacity((h / p) * (w / p));
    for r in (0..h).step_by(p) {
        for c in (0..w).step_by(p) {
            scores.push(window_score(&q, w, r, c, p, params));
        }
    }
    Ok(scores)
}

fn pick(image: &Tensor, p: usize, params: &GlcmParams, better: fn(f64, f64) -> bool) -> Result<RichestPatch> {
    let scores = patch_scores(image, p, params)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if better(s, scores[best]) {
            best = i;
        }
    }
    let cols = image.shape()[2] / p;
    let coords = ((best / cols) * p, (best % cols) * p);
    Ok(RichestPatch {
        pixels: crop(image, coords.0, coords.1, p),
        homogeneity: scores[best],
        coords,
        index: best,
    })
}

/// The lowest-homogeneity tile; the first one wins ties.
pub fn select_richest(image: &Tensor, p: usize, params: &GlcmParams) -> Result<RichestPatch> {
    pick(image, p, params, |a, b| a < b)
}

/// The highest-homogeneity tile, for inspection only.
pub fn select_poorest(image: &Tensor, p: usize, params: &GlcmParams) -> Result<RichestPatch> {
    pick(image, p, params, |a, b| a > b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, side, side], |_| rng.random::<f64>())
    }

    /// Averages `1 / (1 + |a - b|)` over every ordered pair visited by the
    /// offsets; equal to the symmetric-GLCM homogeneity by construction.
    fn pair_oracle(patch: &Tensor) -> f64 {
        let p = patch.shape()[1];
        let d = patch.data();
        let level = |y: usize, x: usize| {
            let g = 0.299 * d[y * p + x] + 0.587 * d[p * p + y * p + x] + 0.114 * d[2 * p * p + y * p + x];
            ((g * 8.0).floor() as i64).min(7)
        };
        let mut acc = 0.0;
        for (dy, dx) in [(0, 1), (1, 0)] {
            let (mut s, mut n) = (0.0, 0.0);
            for y in 0..p - dy {
                for x in 0..p - dx {
                    s += 1.0 / (1.0 + (level(y, x) - level(y + dy, x + dx)).abs() as f64);
                    n += 1.0;
                }
            }
            acc += s / n;
        }
        acc / 2.0
    }

    #[test]
    fn tile_counts() {
        let img = random_image(224, 1);
        assert_eq!(split_patches(&img, 112).unwrap().patches.len(), 4);
        let one = split_patches(&img, 224).unwrap();
        assert_eq!(one.patches.len(), 1);
        assert_eq!(one.patches[0], img);
        let g = split_patches(&img, 56).unwrap();
        assert_eq!(g.patches.len(), 16);
        assert_eq!(g.reassemble(224, 224), img);
        assert!(matches!(split_patches(&img, 50), Err(Error::Config(_))));
    }

    #[test]
    fn constant_patch_is_fully_homogeneous() {
        let t = Tensor::full(&[3, 16, 16], 0.4);
        assert_eq!(glcm_homogeneity(&t, &GlcmParams::default()), 1.0);
    }

    #[test]
    fn extreme_checkerboard() {
        let t = Tensor::from_fn(&[3, 16, 16], |i| ((i % 16 + (i / 16) % 16) % 2) as f64);
        assert!((glcm_homogeneity(&t, &GlcmParams::default()) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn matrices_are_symmetric_and_normalized() {
        let img = random_image(28, 2);
        for m in glcm_matrices(&img, &GlcmParams::default()) {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(m[i * 8 + j], m[j * 8 + i]);
                }
            }
        }
    }

    #[test]
    fn homogeneity_matches_pair_oracle() {
        for seed in 0..20 {
            let img = random_image(32, seed);
            let got = glcm_homogeneity(&img, &GlcmParams::default());
            assert!((got - pair_oracle(&img)).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_quadrant_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = Tensor::full(&[3, 224, 224], 0.5);
        let d = img.data_mut();
        for c in 0..3 {
            for y in 112..224 {
                for x in 0..112 {
                    d[(c * 224 + y) * 224 + x] = rng.random();
                }
            }
        }
        let r = select_richest(&img, 112, &GlcmParams::default()).unwrap();
        assert_eq!((r.index, r.coords), (2, (112, 0)));
        assert!((r.homogeneity - pair_oracle(&r.pixels)).abs() < 1e-9);
    }

    #[test]
    fn constant_image_picks_first_patch() {
        let img = Tensor::full(&[3, 224, 224], 0.2);
        let r = select_richest(&img, 112, &GlcmParams::default()).unwrap();
        assert_eq!((r.index, r.homogeneity), (0, 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn noise_lowers_homogeneity(seed in any::<u64>(), base in 0.0f64..1.0, amp in 0.5f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat = Tensor::full(&[3, 16, 16], base);
            let noisy = Tensor::from_fn(&[3, 16, 16], |_| (base + amp * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            let params = GlcmParams::default();
            prop_assert!(glcm_homogeneity(&noisy, &params) < glcm_homogeneity(&flat, &params));
        }

        #[test]
        fn homogeneity_in_unit_interval(seed in any::<u64>()) {
            let h = glcm_homogeneity(&random_image(16, seed), &GlcmParams::default());
            prop_assert!(h > 0.0 && h <= 1.0);
        }

        #[test]
        fn permuting_other_patches_keeps_selection(seed in any::<u64>(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let img = random_image(224, seed);
            let params = GlcmParams::default();
            let r = select_richest(&img, 56, &params).unwrap();
            let mut grid = split_patches(&img, 56).unwrap();
            let mut others: Vec<usize> = (0..grid.patches.len()).filter(|&i| i != r.index).collect();
            let orig = others.clone();
            others.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let snapshot = grid.patches.clone();
            for (dst, src) in orig.iter().zip(&others) {
                grid.patches[*dst] = snapshot[*src].clone();
            }
            let r2 = select_richest(&grid.reassemble(224, 224), 56, &params).unwrap();
            prop_assert_eq!(r2.pixels, r.pixels);
        }
    }
}
