//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by `section.key=value` overrides. Unknown keys are rejected at every layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DecodePolicy;
use crate::error::{Error, IoContext, Result};
use crate::patch::GlcmParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub blocks: usize,
    /// Output channels of the stride-2 stem convolutions.
    pub stem: Vec<usize>,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            stem: vec![32, 64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseEncoderConfig {
    /// Output channels of the stride-2 stem convolutions.
    pub stem: Vec<usize>,
    /// Zero padding of each stem convolution.
    pub pads: Vec<usize>,
}

impl Default for NoiseEncoderConfig {
    fn default() -> Self {
        Self {
            stem: vec![16, 32, 64, 64],
            pads: vec![1, 1, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch side for the noise branch.
    pub p: usize,
    /// Shared feature width.
    pub d: usize,
    /// Noise transformer depth.
    #[serde(rename = "B")]
    pub noise_blocks: usize,
    /// Language encoder depth.
    #[serde(rename = "L")]
    pub text_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Expected noise-backbone output `c x h x w`.
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ie: ImageEncoderConfig,
    pub ne: NoiseEncoderConfig,
    pub glcm: GlcmParams,
    pub srm_q: f64,
    pub tau_init: f64,
    pub kl_temperature: f64,
    pub vocab_path: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p: 112,
            d: 512,
            noise_blocks: 3,
            text_blocks: 6,
            heads: 8,
            mlp_ratio: 4,
            c: 64,
            h: 8,
            w: 8,
            ie: ImageEncoderConfig::default(),
            ne: NoiseEncoderConfig::default(),
            glcm: GlcmParams::default(),
            srm_q: crate::srm::SRM_Q,
            tau_init: 0.07,
            kl_temperature: 0.5,
            vocab_path: None,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            d: 64,
            noise_blocks: 1,
            text_blocks: 2,
            heads: 2,
            ie: ImageEncoderConfig {
                blocks: 1,
                stem: vec![8, 16, 32, 32],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.ne.stem.is_empty() || self.ne.stem.len() != self.ne.pads.len() {
            return bad("ne.stem and ne.pads must be non-empty and equally long".into());
        }
        if self.ie.stem.is_empty() {
            return bad("ie.stem must be non-empty".into());
        }
        if *self.ne.stem.last().unwrap() != self.c {
            return bad(format!("last ne.stem width {} differs from c={}", self.ne.stem.last().unwrap(), self.c));
        }
        if self.glcm.levels < 2 || self.glcm.levels > 256 || self.glcm.offsets.is_empty() {
            return bad("glcm needs 2..=256 levels and at least one offset".into());
        }
        if !(self.srm_q > 0.0 && self.tau_init > 0.0 && self.kl_temperature > 0.0) {
            return bad("srm_q, tau_init and kl_temperature must be positive".into());
        }
        crate::patch::check_patch_size(self.p, crate::data::IMAGE_SIZE, crate::data::IMAGE_SIZE)?;
        let side = self.noise_out_side(self.p);
        if (side, side) != (self.h, self.w) {
            let supported: Vec<usize> = crate::patch::VALID_PATCH_SIZES
                .into_iter()
                .filter(|&p| self.noise_out_side(p) == self.h && self.h == self.w)
                .collect();
            return bad(format!(
                "noise stem maps p={} to {side}x{side}, expected h x w = {}x{}; supported p for this stem: {supported:?}",
                self.p, self.h, self.w
            ));
        }
        Ok(())
    }

    /// Spatial side after the noise stem (3x3 kernels, stride 2).
    pub fn noise_out_side(&self, p: usize) -> usize {
        self.ne.pads.iter().fold(p, |n, &pad| (n + 2 * pad).saturating_sub(3) / 2 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub kl: bool,
    pub cmc: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { kl: true, cmc: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentToggles {
    pub ne: bool,
    pub ie: bool,
    pub fle: bool,
    pub predictor: bool,
    pub spa: bool,
}

impl Default for ComponentToggles {
    fn default() -> Self {
        Self {
            ne: true,
            ie: true,
            fle: true,
            predictor: true,
            spa: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub kl: f64,
    pub cmc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            kl: 1.0,
            cmc: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeErrors {
    Abort,
    Skip,
}

impl From<DecodeErrors> for DecodePolicy {
    fn from(d: DecodeErrors) -> Self {
        match d {
            DecodeErrors::Abort => DecodePolicy::Abort,
            DecodeErrors::Skip => DecodePolicy::Skip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Decoupled (AdamW-style) decay when true, L2-in-gradient otherwise.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub step_epochs: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub b: usize,
    pub seed: u64,
    pub losses: LossToggles,
    pub components: ComponentToggles,
    pub weights: LossWeights,
    pub decode_errors: DecodeErrors,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            decoupled_weight_decay: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            step_epochs: 15,
            gamma: 0.1,
            epochs: 30,
            b: 24,
            seed: 0,
            losses: LossToggles::default(),
            components: ComponentToggles::default(),
            weights: LossWeights::default(),
            decode_errors: DecodeErrors::Abort,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.components.ie && !self.components.ne {
            return Err(Error::Config("at least one of components.ie / components.ne must be enabled".into()));
        }
        if self.b == 0 {
            return Err(Error::Config("batch size b must be positive".into()));
        }
        if self.step_epochs == 0 {
            return Err(Error::Config("step_epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether the KL term participates given toggles and components.
    pub fn kl_active(&self) -> bool {
        self.losses.kl && self.components.fle && self.components.predictor
    }

    pub fn cmc_active(&self) -> bool {
        self.losses.cmc && self.components.fle
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, batch: 32 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig {
                b: 8,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Overlays TOML text on `self`.
    pub fn merge_toml(&self, text: &str, origin: &str) -> Result<Self> {
        let layer: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        let mut base = self.to_table();
        merge_tables(&mut base, layer);
        Self::from_table(base, origin)
    }

    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        self.merge_toml(&text, &path.display().to_string())
    }

    /// Applies `a.b.c=value` overrides; `value` is read as a TOML value and
    /// falls back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut base = self.to_table();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut layer = toml::Table::new();
            let mut cursor = &mut layer;
            for part in &path[..path.len() - 1] {
                cursor = cursor
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .unwrap();
            }
            cursor.insert(path[path.len() - 1].to_string(), value);
            merge_tables(&mut base, layer);
        }
        Self::from_table(base, "overrides")
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    fn from_table(t: toml::Table, origin: &str) -> Result<Self> {
        toml::Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge_tables(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge_tables(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn noise_stem_reaches_eight() {
        let m = ModelConfig::default();
        assert_eq!(m.noise_out_side(112), 8);
        let oracle = |mut n: usize| {
            for pad in [1, 1, 1, 2] {
                n = (n + 2 * pad - 3) / 2 + 1;
            }
            n
        };
        for p in crate::patch::VALID_PATCH_SIZES {
            assert_eq!(m.noise_out_side(p), oracle(p));
        }
    }

    #[test]
    fn wrong_patch_size_lists_supported() {
        let cfg = RunConfig::default().apply_overrides(&["model.p=56"]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("[112]"), "{msg}");
    }

    #[test]
    fn layering_order() {
        let file = "[train]\nlr = 0.5\nepochs = 3\n[model]\nB = 2\n";
        let c = RunConfig::default().merge_toml(file, "f").unwrap();
        assert_eq!((c.train.lr, c.train.epochs, c.model.noise_blocks), (0.5, 3, 2));
        let c = c.apply_overrides(&["train.lr=0.25", "train.losses.kl=false", "model.ie.stem=[4,4]"]).unwrap();
        assert_eq!(c.train.lr, 0.25);
        assert!(!c.train.losses.kl);
        assert_eq!(c.model.ie.stem, vec![4, 4]);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::default().merge_toml("[train]\nlearning_rate = 1\n", "f").is_err());
        assert!(RunConfig::default().apply_overrides(&["model.depth=3"]).is_err());
        assert!(RunConfig::default().merge_toml("bogus = 1\n", "f").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::toy().apply_overrides(&["train.seed=42", "model.vocab_path=v.txt"]).unwrap();
        let back = RunConfig::default().merge_toml(&c.to_toml(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn at_least_one_vision_branch() {
        let c = RunConfig::default().apply_overrides(&["train.components.ie=false", "train.components.ne=false"]).unwrap();
        assert!(c.validate().is_err());
    }
}
