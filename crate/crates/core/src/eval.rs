//! Detection metrics and the image corruption suite.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{rgb_to_tensor, tensor_to_rgb};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Per-sample fake probabilities with binary labels (`true` = fake).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Fraction of samples with `(score >= threshold) == label`.
pub fn accuracy(s: &ScoreSet, threshold: f64) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Metric("accuracy of an empty score set".into()));
    }
    let hits = s.scores.iter().zip(&s.labels).filter(|(&p, &y)| (p >= threshold) == y).count();
    Ok(hits as f64 / s.len() as f64)
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let n_pos = s.labels.iter().filter(|&&y| y).count();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    if s.scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| s.labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerturbKind {
    Saturation,
    Contrast,
    Block,
    GaussianNoise,
    Blur,
    Pixelation,
    Compression,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 7] = [
        PerturbKind::Saturation,
        PerturbKind::Contrast,
        PerturbKind::Block,
        PerturbKind::GaussianNoise,
        PerturbKind::Blur,
        PerturbKind::Pixelation,
        PerturbKind::Compression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Saturation => "saturation",
            PerturbKind::Contrast => "contrast",
            PerturbKind::Block => "block",
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::Blur => "blur",
            PerturbKind::Pixelation => "pixelation",
            PerturbKind::Compression => "compression",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation {s:?}")))
    }
}

/// Number of intensity levels including the identity level 0.
pub const LEVELS: usize = 6;

pub const SATURATION: [f64; LEVELS] = [1.0, 0.8, 0.6, 0.4, 0.2, 0.0];
pub const CONTRAST: [f64; LEVELS] = [1.0, 0.85, 0.7, 0.55, 0.4, 0.25];
pub const BLOCKS: [usize; LEVELS] = [0, 2, 4, 6, 8, 10];
pub const BLOCK_SIDE: usize = 16;
pub const NOISE_SIGMA: [f64; LEVELS] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.15];
pub const BLUR_KERNEL: [usize; LEVELS] = [1, 3, 5, 7, 9, 11];
pub const PIXELATION: [usize; LEVELS] = [1, 2, 4, 8, 16, 32];
pub const JPEG_QUALITY: [u8; LEVELS] = [100, 90, 70, 50, 30, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub level: usize,
}

/// Corrupts a `3 x h x w` image. Level 0 returns an exact copy.
pub fn apply_perturbation(image: &Tensor, spec: PerturbSpec, seed: u64) -> Result<Tensor> {
    if spec.level >= LEVELS {
        return Err(Error::Config(format!("perturbation level {} outside 0..{LEVELS}", spec.level)));
    }
    if spec.level == 0 {
        return Ok(image.clone());
    }
    let l = spec.level;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let gray = |d: &[f64], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    let mut out = image.clone();
    match spec.kind {
        PerturbKind::Saturation => {
            let s = SATURATION[l];
            let src = image.data();
            let d = out.data_mut();
            for i in 0..plane {
                let g = gray(src, i);
                for c in 0..3 {
                    d[c * plane + i] = (g + s * (src[c * plane + i] - g)).clamp(0.0, 1.0);
                }
            }
        }
        PerturbKind::Contrast => {
            let src = image.data();
            let mean = (0..plane).map(|i| gray(src, i)).sum::<f64>() / plane as f64;
            let k = CONTRAST[l];
            out.data_mut().iter_mut().for_each(|v| *v = (mean + k * (*v - mean)).clamp(0.0, 1.0));
        }
        PerturbKind::Block => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = out.data_mut();
            for _ in 0..BLOCKS[l] {
                let y0 = rng.random_range(0..=h - BLOCK_SIDE);
                let x0 = rng.random_range(0..=w - BLOCK_SIDE);
                for c in 0..3 {
                    for y in y0..y0 + BLOCK_SIDE {
                        d[c * plane + y * w + x0..c * plane + y * w + x0 + BLOCK_SIDE].fill(0.5);
                    }
                }
            }
        }
        PerturbKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, NOISE_SIGMA[l]).unwrap();
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0));
        }
        PerturbKind::Blur => {
            let r = BLUR_KERNEL[l] / 2;
            let d = out.data_mut();
            for c in 0..3 {
                box_blur_plane(&mut d[c * plane..(c + 1) * plane], h, w, r);
            }
        }
        PerturbKind::Pixelation => {
            let f = PIXELATION[l];
            let d = out.data_mut();
            for c in 0..3 {
                let p = &mut d[c * plane..(c + 1) * plane];
                for by in (0..h).step_by(f) {
                    for bx in (0..w).step_by(f) {
                        let (ye, xe) = ((by + f).min(h), (bx + f).min(w));
                        let mut s = 0.0;
                        for y in by..ye {
                            s += p[y * w + bx..y * w + xe].iter().sum::<f64>();
                        }
                        let m = s / ((ye - by) * (xe - bx)) as f64;
                        for y in by..ye {
                            p[y * w + bx..y * w + xe].fill(m);
                        }
                    }
                }
            }
        }
        PerturbKind::Compression => {
            let rgb = tensor_to_rgb(image);
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(Cursor::new(&mut buf), JPEG_QUALITY[l])
                .encode_image(&rgb)
                .map_err(|e| Error::Metric(format!("jpeg encode: {e}")))?;
            let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
                .map_err(|e| Error::Metric(format!("jpeg decode: {e}")))?
                .to_rgb8();
            out = rgb_to_tensor(&decoded);
        }
    }
    Ok(out)
}

/// Separable mean filter of radius `r`, edges clamped to the border pixel.
fn box_blur_plane(p: &mut [f64], h: usize, w: usize, r: usize) {
    let n = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -(r as isize)..=r as isize {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                s += p[y * w + xx];
            }
            tmp[y * w + x] = s / n;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -(r as isize)..=r as isize {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            p[y * w + x] = s / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_set(n: usize, seed: u64, ties: bool) -> ScoreSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = (0..n)
            .map(|i| {
                let v: f64 = rng.random::<f64>() * 0.7 + if labels[i] { 0.3 } else { 0.0 };
                if ties {
                    (v * 10.0).round() / 10.0
                } else {
                    v
                }
            })
            .collect();
        ScoreSet { scores, labels }
    }

    fn pairwise_auc(s: &ScoreSet) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s.labels[i] && !s.labels[j] {
                    den += 1.0;
                    num += if s.scores[i] > s.scores[j] {
                        1.0
                    } else if s.scores[i] == s.scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_landmarks() {
        let s = ScoreSet::new(vec![0.9, 0.1, 0.7], vec![true, false, true]).unwrap();
        assert_eq!(accuracy(&s, 0.5).unwrap(), 1.0);
        let flipped = ScoreSet::new(vec![0.1, 0.9, 0.3], vec![true, false, true]).unwrap();
        assert_eq!(accuracy(&flipped, 0.5).unwrap(), 0.0);
        assert!(accuracy(&ScoreSet::default(), 0.5).is_err());
    }

    #[test]
    fn accuracy_matches_counting_loop() {
        let s = random_set(200, 4, false);
        let mut hits = 0;
        for i in 0..s.len() {
            let pred = s.scores[i] >= 0.5;
            if pred == s.labels[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&s, 0.5).unwrap(), hits as f64 / 200.0);
    }

    #[test]
    fn auc_landmarks() {
        let sep = ScoreSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![false, false, true, true]).unwrap();
        assert_eq!(auc(&sep).unwrap(), 1.0);
        let flat = ScoreSet::new(vec![0.3; 6], vec![true, false, true, false, false, true]).unwrap();
        assert_eq!(auc(&flat).unwrap(), 0.5);
        assert!(auc(&ScoreSet::new(vec![0.1, 0.2], vec![true, true]).unwrap()).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        for (seed, ties) in [(1, false), (2, true), (3, true)] {
            let s = random_set(500, seed, ties);
            assert!((auc(&s).unwrap() - pairwise_auc(&s)).abs() < 1e-12);
        }
    }

    #[test]
    fn every_kind_is_identity_at_level_zero() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 37) % 101) as f64 / 100.0);
        for kind in PerturbKind::ALL {
            let out = apply_perturbation(&img, PerturbSpec { kind, level: 0 }, 9).unwrap();
            assert!(out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(kind.name().parse::<PerturbKind>().unwrap(), kind);
        }
    }

    #[test]
    fn pixelation_level_two_is_blockwise_constant() {
        let img = Tensor::from_fn(&[3, 224, 224], |i| ((i * 7919) % 1000) as f64 / 1000.0);
        let out = apply_perturbation(&img, PerturbSpec { kind: PerturbKind::Pixelation, level: 2 }, 0).unwrap();
        let mut blocks = 0;
        for c in 0..3 {
            for by in (0..224).step_by(4) {
                for bx in (0..224).step_by(4) {
                    let v0 = out.data()[(c * 224 + by) * 224 + bx];
                    for y in by..by + 4 {
                        for x in bx..bx + 4 {
                            assert_eq!(out.data()[(c * 224 + y) * 224 + x], v0);
                        }
                    }
                    blocks += (c == 0) as usize;
                }
            }
        }
        assert_eq!(blocks, 56 * 56);
    }

    #[test]
    fn blocks_are_gray() {
        let img = Tensor::zeros(&[3, 64, 64]);
        let out = apply_perturbation(&img, PerturbSpec { kind: PerturbKind::Block, level: 1 }, 3).unwrap();
        let gray = out.data().iter().filter(|&&v| v == 0.5).count();
        assert!((3 * 256..=3 * 512).contains(&gray));
    }

    #[test]
    fn saturation_zero_is_gray() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 13) as f64 / 13.0);
        let out = apply_perturbation(&img, PerturbSpec { kind: PerturbKind::Saturation, level: 5 }, 0).unwrap();
        for i in 0..64 {
            assert!((out.data()[i] - out.data()[64 + i]).abs() < 1e-12);
            assert!((out.data()[i] - out.data()[128 + i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_maps(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let s = random_set(60, seed, true);
            let mapped = ScoreSet { scores: s.scores.iter().map(|v| (a * v + b).exp()).collect(), labels: s.labels.clone() };
            prop_assert!((auc(&s).unwrap() - auc(&mapped).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn flipped_accuracies_sum_to_one(seed in any::<u64>()) {
            let s = random_set(50, seed, false);
            prop_assume!(s.scores.iter().all(|v| (v - 0.5).abs() > 1e-9));
            let f = ScoreSet { scores: s.scores.iter().map(|v| 1.0 - v).collect(), labels: s.labels.clone() };
            prop_assert!((accuracy(&s, 0.5).unwrap() + accuracy(&f, 0.5).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
