#![allow(dead_code)]

use mfclip::config::RunConfig;
use mfclip::data::{Batch, ImageSample};
use mfclip::ftg::Vocab;
use mfclip::nn::Tensor;
use mfclip::synthetic::{derive_seed, fake_label, synthetic_image};
use mfclip::taxonomy::HierLabel;

pub fn toy(b: usize) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.train.b = b;
    cfg
}

/// Alternating real/fake synthetic samples.
pub fn samples(n: usize, seed: u64, amp: f64) -> Vec<ImageSample> {
    (0..n)
        .map(|i| {
            let fake = (i % 2 == 1).then(|| fake_label(i / 2 + seed as usize));
            let im = synthetic_image(derive_seed(seed, i as u64), fake, amp);
            ImageSample {
                pixels: im.pixels,
                label: im.label,
                source_id: format!("s{seed}-{i}"),
            }
        })
        .collect()
}

pub fn batch(n: usize, seed: u64, amp: f64) -> Batch {
    Batch::from_samples(samples(n, seed, amp))
}

pub fn parts(b: &Batch) -> (Vec<&Tensor>, Vec<HierLabel>) {
    (
        b.samples.iter().map(|s| &s.pixels).collect(),
        b.samples.iter().map(|s| s.label.clone()).collect(),
    )
}

pub fn vocab() -> Vocab {
    Vocab::from_generators(mfclip::taxonomy::KNOWN_GENERATORS.iter().map(|g| g.2))
}
