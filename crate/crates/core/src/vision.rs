//! Multi-modal vision encoder: a conv-ViT image branch and an SRM noise
//! branch whose class-token outputs are summed.

use crate::config::ModelConfig;
use crate::data::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, Linear, ParamId, ParamStore, Tensor, TransformerBlock, Var};
use crate::patch::{select_richest, GlcmParams};
use crate::srm::SrmFilterBank;

const EMBED_STD: f64 = 0.02;

/// Per-channel statistics used to standardize image-branch inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ImageNorm {
    /// Population mean and standard deviation over every pixel.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0.0;
        for img in images {
            let plane = img.numel() / 3;
            for c in 0..3 {
                for &v in &img.data()[c * plane..(c + 1) * plane] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += plane as f64;
        }
        let mean = sum.map(|s| s / n.max(1.0));
        let std = std::array::from_fn(|c| (sq[c] / n.max(1.0) - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6));
        Self { mean, std }
    }

    /// Standardizes a `b x 3 x h x w` batch in place.
    pub fn apply(&self, batch: &mut Tensor) {
        let plane = batch.shape()[2] * batch.shape()[3];
        for (i, chunk) in batch.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 3;
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }
}

fn stride2_stem(store: &mut ParamStore, init: &mut Init, name: &str, widths: &[usize], pads: &[usize], mut side: usize) -> (Vec<Conv2d>, usize) {
    let mut cin = 3;
    let mut convs = Vec::with_capacity(widths.len());
    for (i, (&w, &pad)) in widths.iter().zip(pads).enumerate() {
        let conv = Conv2d::new(store, init, &format!("{name}.stem{i}"), cin, w, 3, 2, pad);
        side = conv.out_size(side);
        convs.push(conv);
        cin = w;
    }
    (convs, side)
}

fn run_stem(convs: &[Conv2d], g: &mut Graph, mut x: Var) -> Var {
    for conv in convs {
        let y = conv.forward(g, x);
        x = g.relu(y);
    }
    x
}

/// Conv-ViT producing `X_i`: a stride-2 conv stem, token projection, a
/// prepended class token, position embeddings and transformer blocks.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stem: Vec<Conv2d>,
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub grid: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        let pads = vec![1; cfg.ie.stem.len()];
        let (stem, grid) = stride2_stem(store, init, "ie", &cfg.ie.stem, &pads, IMAGE_SIZE);
        let proj = Linear::new(store, init, "ie.proj", *cfg.ie.stem.last().unwrap(), cfg.d, true);
        let cls = store.add("ie.cls", init.trunc_normal(&[1, 1, cfg.d], EMBED_STD), false);
        let pos = store.add("ie.pos", init.trunc_normal(&[grid * grid + 1, cfg.d], EMBED_STD), false);
        let blocks = (0..cfg.ie.blocks)
            .map(|i| TransformerBlock::new(store, init, &format!("ie.block{i}"), cfg.d, cfg.heads, cfg.mlp_ratio))
            .collect();
        Self {
            stem,
            proj,
            cls,
            pos,
            blocks,
            grid,
        }
    }

    /// `b x 3 x 224 x 224` standardized images to `b x d`.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Var {
        let b = g.shape(images)[0];
        let fmap = run_stem(&self.stem, g, images);
        let tokens = g.chw_to_tokens(fmap);
        let tokens = self.proj.forward(g, tokens);
        let cls = g.param(self.cls);
        let mut t = g.cat_tokens(cls, tokens);
        let pos = g.param(self.pos);
        t = g.add_bcast(t, pos);
        for blk in &self.blocks {
            t = blk.forward(g, t);
        }
        g.gather_tokens(t, vec![0; b])
    }
}

/// Noise branch: CNN backbone over the SRM residual, one projected map token
/// plus a class token, and the noise transformer (NoT).
#[derive(Clone, Debug)]
pub struct NoiseEncoder {
    pub stem: Vec<Conv2d>,
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub out_shape: [usize; 3],
}

impl NoiseEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        let (stem, side) = stride2_stem(store, init, "ne", &cfg.ne.stem, &cfg.ne.pads, cfg.p);
        let c = *cfg.ne.stem.last().unwrap();
        let proj = Linear::new(store, init, "ne.proj", c * side * side, cfg.d, true);
        let cls = store.add("ne.cls", init.trunc_normal(&[1, 1, cfg.d], EMBED_STD), false);
        let pos = store.add("ne.pos", init.trunc_normal(&[2, cfg.d], EMBED_STD), false);
        let blocks = (0..cfg.noise_blocks)
            .map(|i| TransformerBlock::new(store, init, &format!("ne.block{i}"), cfg.d, cfg.heads, cfg.mlp_ratio))
            .collect();
        Self {
            stem,
            proj,
            cls,
            pos,
            blocks,
            out_shape: [c, side, side],
        }
    }

    /// `b x 3 x p x p` residuals to the local map `b x c x h x w`.
    pub fn backbone(&self, g: &mut Graph, noise: Var) -> Var {
        run_stem(&self.stem, g, noise)
    }

    /// Flattens and projects the map to one token, appends the class token
    /// and adds the position embedding: `b x 2 x d`.
    pub fn tokenize(&self, g: &mut Graph, local: Var) -> Result<Var> {
        let s = g.shape(local).to_vec();
        let [c, h, w] = self.out_shape;
        if s[1..] != [c, h, w] {
            return Err(Error::Shape(format!("noise map {:?} does not match projection input {c}x{h}x{w}", &s[1..])));
        }
        let flat = g.reshape(local, &[s[0], 1, c * h * w]);
        let map_token = self.proj.forward(g, flat);
        let cls = g.param(self.cls);
        let t = g.cat_tokens(map_token, cls);
        let pos = g.param(self.pos);
        Ok(g.add_bcast(t, pos))
    }

    /// Runs the noise transformer and returns the class-token output `N_n`.
    pub fn not_forward(&self, g: &mut Graph, tokens: Var) -> Var {
        let b = g.shape(tokens)[0];
        let mut t = tokens;
        for blk in &self.blocks {
            t = blk.forward(g, t);
        }
        g.gather_tokens(t, vec![1; b])
    }
}

/// Branch outputs of one vision pass. Disabled branches are `None`.
#[derive(Clone, Copy, Debug)]
pub struct MveOutput {
    pub x_i: Option<Var>,
    pub n_n: Option<Var>,
    pub x_v: Var,
}

/// Patch selection plus SRM: the non-trainable front of the noise branch.
#[derive(Clone, Debug)]
pub struct NoisePreprocessor {
    pub p: usize,
    pub glcm: GlcmParams,
    pub srm: SrmFilterBank,
}

impl NoisePreprocessor {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            p: cfg.p,
            glcm: cfg.glcm.clone(),
            srm: SrmFilterBank::with_q(cfg.srm_q),
        }
    }

    /// `b x 3 x p x p` residuals of each image's richest patch.
    pub fn residuals(&self, images: &[&Tensor]) -> Result<Tensor> {
        let parts = images
            .iter()
            .map(|img| Ok(self.srm.extract(&select_richest(img, self.p, &self.glcm)?.pixels)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts.iter().collect::<Vec<_>>())
    }
}

/// Stacks `3 x 224 x 224` images and standardizes them.
pub fn image_batch(images: &[&Tensor], norm: &ImageNorm) -> Result<Tensor> {
    for img in images {
        if img.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Shape(format!("image {:?}, expected [3, 224, 224]", img.shape())));
        }
    }
    let mut t = Tensor::stack(images)?;
    norm.apply(&mut t);
    Ok(t)
}

/// `X_v = X_i + N_n` with either branch optionally disabled.
pub fn mve_forward(
    g: &mut Graph,
    ie: Option<&ImageEncoder>,
    ne: Option<(&NoiseEncoder, &NoisePreprocessor)>,
    norm: &ImageNorm,
    images: &[&Tensor],
) -> Result<MveOutput> {
    let x_i = match ie {
        Some(ie) => {
            let x = g.input(image_batch(images, norm)?);
            Some(ie.forward(g, x))
        }
        None => None,
    };
    let n_n = match ne {
        Some((ne, pre)) => {
            let noise = g.input(pre.residuals(images)?);
            let local = ne.backbone(g, noise);
            let tokens = ne.tokenize(g, local)?;
            Some(ne.not_forward(g, tokens))
        }
        None => None,
    };
    let x_v = match (x_i, n_n) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Config("both vision branches are disabled".into())),
    };
    Ok(MveOutput { x_i, n_n, x_v })
}
