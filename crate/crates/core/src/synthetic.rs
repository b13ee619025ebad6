//! A separable toy dataset standing in for real face corpora.
//!
//! Real images are smooth random fields. Fake images are the same kind of
//! field plus a high-frequency checker/noise signature confined to one
//! quadrant, with amplitude `p_signal`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_png, DatasetManifest, ManifestEntry, Split, IMAGE_SIZE};
use crate::error::{Error, IoContext, Result};
use crate::nn::Tensor;
use crate::taxonomy::{HierLabel, KNOWN_GENERATORS};

const S: usize = IMAGE_SIZE;

/// Mixes a seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth `3 x 224 x 224` field: a tinted gray level plus a few long-wave
/// sinusoids, staying inside roughly `[0.2, 0.8]`.
pub fn smooth_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: f64 = rng.random_range(0.35..0.65);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.5..2.5) * 2.0 * PI / S as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.01..0.035);
            (angle.cos() * freq, angle.sin() * freq, phase, amp)
        })
        .collect();
    let mut field = vec![0.0; S * S];
    for y in 0..S {
        for x in 0..S {
            field[y * S + x] = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>();
        }
    }
    Tensor::from_fn(&[3, S, S], |i| (base + tint[i / (S * S)] + field[i % (S * S)]).clamp(0.0, 1.0))
}

/// Top-left corner of quadrant `q` (0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right).
pub fn quadrant_origin(q: usize) -> (usize, usize) {
    ((q / 2) * S / 2, (q % 2) * S / 2)
}

/// Adds `amp * (0.5 * checker + 0.5 * noise)` inside quadrant `q`, where the
/// checker alternates `+-0.5` and the noise is uniform on `[-0.5, 0.5]`; the
/// same offset is added to every channel.
pub fn add_signature(img: &mut Tensor, q: usize, amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r0, c0) = quadrant_origin(q);
    let half = S / 2;
    let d = img.data_mut();
    for y in r0..r0 + half {
        for x in c0..c0 + half {
            let checker = if (x + y) % 2 == 0 { 0.5 } else { -0.5 };
            let noise: f64 = rng.random_range(-0.5..0.5);
            let delta = amp * (0.5 * checker + 0.5 * noise);
            for c in 0..3 {
                let v = &mut d[(c * S + y) * S + x];
                *v = (*v + delta).clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub pixels: Tensor,
    pub label: HierLabel,
    pub quadrant: Option<usize>,
}

/// Builds one image from `base_seed`; fakes pick their quadrant and noise
/// from a stream derived from the same seed, so a fake and a real built from
/// one base seed agree outside the quadrant.
pub fn synthetic_image(base_seed: u64, fake: Option<HierLabel>, p_signal: f64) -> SyntheticImage {
    let mut pixels = smooth_image(base_seed);
    match fake {
        None => SyntheticImage {
            pixels,
            label: HierLabel::real(),
            quadrant: None,
        },
        Some(label) => {
            let sig = derive_seed(base_seed, 1);
            let q = (derive_seed(sig, 2) % 4) as usize;
            add_signature(&mut pixels, q, p_signal, sig);
            SyntheticImage {
                pixels,
                label,
                quadrant: Some(q),
            }
        }
    }
}

/// Label of the `i`-th synthetic fake; cycles through the known generators.
pub fn fake_label(i: usize) -> HierLabel {
    HierLabel::for_generator(KNOWN_GENERATORS[i % KNOWN_GENERATORS.len()].2).unwrap()
}

/// Writes `n_real + n_fake` PNGs and `manifest.tsv` into `dir`.
pub fn make_synthetic_dataset(dir: &Path, n_real: usize, n_fake: usize, p_signal: f64, seed: u64) -> Result<DatasetManifest> {
    if n_real == 0 || n_fake == 0 {
        return Err(Error::Config("synthetic dataset needs at least one real and one fake image".into()));
    }
    if !(0.0..=1.0).contains(&p_signal) {
        return Err(Error::Config(format!("p_signal {p_signal} outside [0, 1]")));
    }
    fs::create_dir_all(dir).at(dir)?;
    let mut entries = Vec::with_capacity(n_real + n_fake);
    for i in 0..n_real {
        let img = synthetic_image(derive_seed(seed, 2 * i as u64), None, p_signal);
        let path = dir.join(format!("real_{i:05}.png"));
        save_png(&img.pixels, &path)?;
        entries.push(ManifestEntry { path, label: img.label });
    }
    for i in 0..n_fake {
        let img = synthetic_image(derive_seed(seed, 2 * i as u64 + 1), Some(fake_label(i)), p_signal);
        let path = dir.join(format!("fake_{i:05}.png"));
        save_png(&img.pixels, &path)?;
        entries.push(ManifestEntry { path, label: img.label });
    }
    let m = DatasetManifest::new(entries, Split::Train, format!("synthetic:p_signal={p_signal}"));
    m.save(&dir.join("manifest.tsv"))?;
    Ok(m)
}
