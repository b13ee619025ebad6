//! The assembled detector: vision encoder, language encoder, SPA gate,
//! predictor and classification head over one parameter store.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::{ComponentToggles, ModelConfig, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::ftg::{generate_prompts, TokenSeq, Vocab, LEVELS};
use crate::language::{read_position, LanguageEncoder};
use crate::nn::{load_tensors, save_tensors, Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};
use crate::spa::{ce_loss, cmc_loss, kl_loss, spa_forward, total_loss, LossVars, SimilarityPair};
use crate::taxonomy::{HierLabel, OneHotLabel};
use crate::vision::{mve_forward, ImageEncoder, ImageNorm, MveOutput, NoiseEncoder, NoisePreprocessor};

pub struct Mfclip {
    pub cfg: ModelConfig,
    pub components: ComponentToggles,
    pub store: ParamStore,
    pub ie: ImageEncoder,
    pub ne: NoiseEncoder,
    pub pre: NoisePreprocessor,
    pub fle: LanguageEncoder,
    /// `ln tau`; the temperature is `exp(log_tau)`.
    pub log_tau: ParamId,
    /// SPA gate logits `A`, `b x b`.
    pub gate: ParamId,
    pub predictor: Linear,
    pub head: Linear,
    pub vocab: Vocab,
    pub norm: ImageNorm,
    pub batch: usize,
}

/// Every graph node a training forward pass exposes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub mve: MveOutput,
    pub logits: Var,
    pub t_l: Option<Var>,
    pub t_pre: Option<Var>,
    pub pair: Option<SimilarityPair>,
    pub loss: LossVars,
}

impl Mfclip {
    /// Fresh parameters drawn from `seed`. `batch` fixes the SPA gate size.
    pub fn new(cfg: &ModelConfig, components: ComponentToggles, batch: usize, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let ie = ImageEncoder::new(&mut store, &mut init, cfg);
        let ne = NoiseEncoder::new(&mut store, &mut init, cfg);
        let fle = LanguageEncoder::new(&mut store, &mut init, cfg, vocab.len());
        let log_tau = store.add("spa.log_tau", Tensor::scalar(cfg.tau_init.ln()), false);
        let gate = store.add("spa.A", Tensor::zeros(&[batch, batch]), false);
        let predictor = Linear::new(&mut store, &mut init, "predictor", cfg.d, cfg.d, true);
        let head = Linear::new(&mut store, &mut init, "head", cfg.d, 2, true);
        Ok(Self {
            cfg: cfg.clone(),
            components,
            store,
            ie,
            ne,
            pre: NoisePreprocessor::new(cfg),
            fle,
            log_tau,
            gate,
            predictor,
            head,
            vocab,
            norm: ImageNorm::default(),
            batch,
        })
    }

    pub fn mve(&self, g: &mut Graph, images: &[&Tensor]) -> Result<MveOutput> {
        let ie = self.components.ie.then_some(&self.ie);
        let ne = self.components.ne.then_some((&self.ne, &self.pre));
        mve_forward(g, ie, ne, &self.norm, images)
    }

    /// `T_l` for every label. The encoder runs once per distinct prompt set
    /// and rows are gathered back into batch order.
    pub fn language(&self, g: &mut Graph, labels: &[HierLabel]) -> Result<Var> {
        let mut unique: Vec<[TokenSeq; LEVELS]> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            let key = l.to_string();
            let i = match seen.get(&key) {
                Some(&i) => i,
                None => {
                    unique.push(self.vocab.encode_prompts(&generate_prompts(l))?);
                    seen.insert(key, unique.len() - 1);
                    unique.len() - 1
                }
            };
            idx.push(i);
        }
        let emb = self.fle.embed(g, &unique)?;
        let t = self.fle.encode(g, emb, unique.iter().map(read_position).collect());
        Ok(g.gather_rows(t, idx))
    }

    /// Builds the full training objective for one batch.
    pub fn forward_train(&self, g: &mut Graph, images: &[&Tensor], labels: &[HierLabel], tcfg: &TrainConfig) -> Result<ForwardVars> {
        let b = images.len();
        if b != labels.len() {
            return Err(Error::Shape(format!("{b} images with {} labels", labels.len())));
        }
        let mve = self.mve(g, images)?;
        let logits = self.head.forward(g, mve.x_v);
        let onehot: Vec<OneHotLabel> = labels.iter().map(HierLabel::one_hot).collect();
        let ce = ce_loss(g, logits, &onehot);

        let (kl_on, cmc_on) = (tcfg.kl_active(), tcfg.cmc_active());
        let t_l = if kl_on || cmc_on { Some(self.language(g, labels)?) } else { None };
        let mut t_pre = None;
        let kl = match t_l {
            Some(t) if kl_on => {
                let p = self.predictor.forward(g, mve.x_v);
                t_pre = Some(p);
                Some(kl_loss(g, p, t, self.cfg.kl_temperature))
            }
            _ => None,
        };
        let mut pair = None;
        let cmc = match t_l {
            Some(t) if cmc_on => {
                let gate = if tcfg.components.spa {
                    if b != self.batch {
                        return Err(Error::Shape(format!("batch of {b} does not match the {0}x{0} SPA gate", self.batch)));
                    }
                    Some(g.param(self.gate))
                } else {
                    None
                };
                let lt = g.param(self.log_tau);
                let p = spa_forward(g, mve.x_v, t, lt, gate);
                pair = Some(p);
                Some(cmc_loss(g, &p))
            }
            _ => None,
        };
        let w = &tcfg.weights;
        let loss = total_loss(g, ce, kl, cmc, [w.ce, w.kl, w.cmc]);
        Ok(ForwardVars {
            mve,
            logits,
            t_l,
            t_pre,
            pair,
            loss,
        })
    }

    /// `softmax(MLP(MVE(X)))` rows `[P(real), P(fake)]`. Only vision and
    /// head parameters are read.
    pub fn infer(&self, images: &[&Tensor]) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::with_params(&self.store);
        let mve = self.mve(&mut g, images)?;
        let logits = self.head.forward(&mut g, mve.x_v);
        let p = g.softmax(logits);
        Ok(g.value(p).data().chunks(2).map(|r| [r[0], r[1]]).collect())
    }

    /// Scores (probability of fake), chunked to bound memory.
    pub fn scores(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            out.extend(self.infer(part)?.into_iter().map(|p| p[1]));
        }
        Ok(out)
    }

    /// Gated and ungated vision-to-language similarity for one full batch.
    pub fn similarity(&self, images: &[&Tensor], labels: &[HierLabel]) -> Result<(Tensor, Tensor)> {
        if images.len() != self.batch || labels.len() != self.batch {
            return Err(Error::Shape(format!("similarity needs exactly b={} samples", self.batch)));
        }
        let mut g = Graph::with_params(&self.store);
        let mve = self.mve(&mut g, images)?;
        let t = self.language(&mut g, labels)?;
        let gate = g.param(self.gate);
        let lt = g.param(self.log_tau);
        let p = spa_forward(&mut g, mve.x_v, t, lt, Some(gate));
        Ok((g.value(p.s_v2l).clone(), g.value(p.ungated_v2l).clone()))
    }

    pub fn temperature(&self) -> f64 {
        self.store.value(self.log_tau).data()[0].exp()
    }

    /// Writes parameters, vocabulary and input statistics under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensors(&dir.join("params"), self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let stats = format!(
            "channel\tmean\tstd\n{}",
            (0..3).map(|c| format!("{c}\t{}\t{}\n", self.norm.mean[c], self.norm.std[c])).collect::<String>()
        );
        let p = dir.join("stats.tsv");
        fs::write(&p, stats).at(&p)
    }

    /// Rebuilds a model saved by [`Mfclip::save`]; every stored tensor must
    /// match the configured architecture by name and shape.
    pub fn load(dir: &Path, cfg: &ModelConfig, components: ComponentToggles, batch: usize) -> Result<Self> {
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut m = Self::new(cfg, components, batch, vocab, 0)?;
        m.load_params(&dir.join("params"))?;
        m.norm = load_stats(&dir.join("stats.tsv"))?;
        Ok(m)
    }

    pub fn load_params(&mut self, dir: &Path) -> Result<()> {
        let tensors = load_tensors(dir)?;
        if tensors.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} tensors, model has {}",
                dir.display(),
                tensors.len(),
                self.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            self.store
                .set(id, t)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

fn load_stats(path: &Path) -> Result<ImageNorm> {
    let text = fs::read_to_string(path).at(path)?;
    let mut norm = ImageNorm::default();
    let mut seen = 0;
    for (i, line) in text.lines().enumerate().skip(1) {
        let perr = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [c, mean, std] = cols[..] else {
            return Err(perr("expected channel, mean, std"));
        };
        let c: usize = c.parse().map_err(|_| perr("bad channel"))?;
        if c >= 3 {
            return Err(perr("channel out of range"));
        }
        norm.mean[c] = mean.parse().map_err(|_| perr("bad mean"))?;
        norm.std[c] = std.parse().map_err(|_| perr("bad std"))?;
        seen += 1;
    }
    if seen != 3 {
        return Err(Error::Checkpoint(format!("{}: expected 3 channels", path.display())));
    }
    Ok(norm)
}
