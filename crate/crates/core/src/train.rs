//! Optimization loop, checkpoints and the per-epoch metric log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{Batch, BatchIter, DatasetManifest, Mode};
use crate::error::{Error, IoContext, Result};
use crate::eval::{accuracy, auc, ScoreSet};
use crate::ftg::Vocab;
use crate::model::Mfclip;
use crate::nn::{Gradients, Graph, Tensor};
use crate::optim::{step_lr, Adam, AdamParams};
use crate::spa::LossParts;
use crate::synthetic::derive_seed;
use crate::taxonomy::HierLabel;
use crate::vision::ImageNorm;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str = "epoch\tlr\tL_ce\tL_kl\tL_cmc\tval_acc\tval_auc";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: u64,
    pub best_auc: Option<f64>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Mfclip,
    pub adam: Adam,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, vocab: Vocab, norm: ImageNorm) -> Result<Self> {
        cfg.validate()?;
        let mut model = Mfclip::new(&cfg.model, cfg.train.components, cfg.train.b, vocab, derive_seed(cfg.train.seed, 0))?;
        model.norm = norm;
        let adam = Adam::new(&model.store);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            state: TrainState::default(),
        })
    }

    pub fn adam_params(&self) -> AdamParams {
        let t = &self.cfg.train;
        AdamParams {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
            decoupled: t.decoupled_weight_decay,
        }
    }

    /// Loss parts and parameter gradients of one batch, without updating.
    pub fn gradients(&self, images: &[&Tensor], labels: &[HierLabel]) -> Result<(LossParts, Gradients)> {
        let mut g = Graph::with_params(&self.model.store);
        let fw = self.model.forward_train(&mut g, images, labels, &self.cfg.train)?;
        let parts = fw.loss.values(&g);
        let grads = g.backward(fw.loss.total);
        Ok((parts, grads))
    }

    /// Forward, backward and one Adam update on a full batch.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossParts> {
        let images: Vec<&Tensor> = batch.samples.iter().map(|s| &s.pixels).collect();
        let labels: Vec<HierLabel> = batch.samples.iter().map(|s| s.label.clone()).collect();
        let (parts, grads) = self.gradients(&images, &labels)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss { source_ids: batch.source_ids() });
        }
        let hp = self.adam_params();
        self.adam.step(&mut self.model.store, &grads, lr, &hp);
        self.state.step += 1;
        Ok(parts)
    }

    /// Checkpoint directory: resolved config, optimizer state, parameters,
    /// vocabulary and input statistics. Written to a sibling and renamed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).at(&tmp)?;
        }
        fs::create_dir_all(&tmp).at(&tmp)?;
        self.model.save(&tmp)?;
        self.adam.save(&tmp, &self.model.store)?;
        let p = tmp.join("config.toml");
        fs::write(&p, self.cfg.to_toml()).at(&p)?;
        let p = tmp.join("state.tsv");
        fs::write(&p, self.state_text()).at(&p)?;
        if dir.exists() {
            fs::remove_dir_all(dir).at(dir)?;
        }
        fs::rename(&tmp, dir).at(dir)
    }

    fn state_text(&self) -> String {
        let best = self.state.best_auc.map_or("-".to_string(), |v| v.to_string());
        format!(
            "version\t{STATE_VERSION}\nepochs_done\t{}\nstep\t{}\nbest_auc\t{best}\n",
            self.state.epochs_done, self.state.step
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = RunConfig::default().merge_file(&dir.join("config.toml"))?;
        let model = Mfclip::load(dir, &cfg.model, cfg.train.components, cfg.train.b)?;
        let state = parse_state(&dir.join("state.tsv"))?;
        let adam = Adam::load(dir, &model.store, state.step)?;
        Ok(Self { cfg, model, adam, state })
    }
}

fn parse_state(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path).at(path)?;
    let mut st = TrainState::default();
    let mut version = None;
    for (i, line) in text.lines().enumerate() {
        let perr = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let (k, v) = line.split_once('\t').ok_or_else(|| perr("expected key<TAB>value".into()))?;
        let num = |v: &str| v.parse::<u64>().map_err(|_| perr(format!("bad integer {v:?}")));
        match k {
            "version" => version = Some(num(v)?),
            "epochs_done" => st.epochs_done = num(v)? as usize,
            "step" => st.step = num(v)?,
            "best_auc" if v == "-" => st.best_auc = None,
            "best_auc" => st.best_auc = Some(v.parse().map_err(|_| perr(format!("bad float {v:?}")))?),
            _ => return Err(perr(format!("unknown key {k:?}"))),
        }
    }
    if version != Some(STATE_VERSION as u64) {
        return Err(Error::Checkpoint(format!("{}: unsupported state version", path.display())));
    }
    Ok(st)
}

/// Loads a checkpoint for evaluation or inference.
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Mfclip)> {
    let t = Trainer::load(dir)?;
    Ok((t.cfg, t.model))
}

/// Fake-probability scores for every manifest entry, in manifest order.
pub fn score_manifest(model: &Mfclip, manifest: &DatasetManifest, chunk: usize) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for batch in BatchIter::new(manifest, chunk, 0, Mode::Eval)? {
        let batch = batch?;
        let images: Vec<&Tensor> = batch.samples.iter().map(|s| &s.pixels).collect();
        scores.extend(model.scores(&images, chunk)?);
        labels.extend(batch.samples.iter().map(|s| s.label.is_fake()));
    }
    ScoreSet::new(scores, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub kl: f64,
    pub cmc: f64,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
}

impl EpochRecord {
    pub fn to_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.lr,
            self.ce,
            self.kl,
            self.cmc,
            opt(self.val_acc),
            opt(self.val_auc)
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Records of epochs run by this call (not earlier resumed ones).
    pub records: Vec<EpochRecord>,
    pub best_auc: Option<f64>,
    pub last: PathBuf,
    pub best: PathBuf,
    pub metrics: PathBuf,
}

/// Input statistics over a manifest.
pub fn manifest_norm(manifest: &DatasetManifest) -> Result<ImageNorm> {
    let mut images = Vec::new();
    for i in 0..manifest.len() {
        images.push(manifest.load_sample(i)?.pixels);
    }
    Ok(ImageNorm::from_images(images.iter()))
}

/// Trains for `cfg.train.epochs` epochs, resuming from `out/last` when it
/// exists. Writes `out/last`, `out/best` (highest validation AUC) and an
/// append-only `out/metrics.tsv`.
pub fn fit(cfg: &RunConfig, train: &DatasetManifest, val: Option<&DatasetManifest>, out: &Path) -> Result<FitReport> {
    cfg.validate()?;
    train.check_trainable()?;
    fs::create_dir_all(out).at(out)?;
    let last = out.join("last");
    let best = out.join("best");
    let metrics = out.join(METRICS_FILE);

    let mut trainer = if last.join("state.tsv").is_file() {
        let t = Trainer::load(&last)?;
        let mut want = cfg.clone();
        want.train.epochs = t.cfg.train.epochs;
        if want != t.cfg {
            return Err(Error::Config(format!(
                "{} was written with a different configuration; refusing to resume",
                last.display()
            )));
        }
        let mut t = t;
        t.cfg.train.epochs = cfg.train.epochs;
        // Drop log rows for epochs the checkpoint does not contain.
        let kept: String = fs::read_to_string(&metrics)
            .unwrap_or_default()
            .lines()
            .filter(|l| l.split('\t').next().and_then(|e| e.parse::<usize>().ok()).is_none_or(|e| e < t.state.epochs_done))
            .fold(String::new(), |mut acc, l| {
                let _ = writeln!(acc, "{l}");
                acc
            });
        let kept = if kept.is_empty() { format!("{METRICS_HEADER}\n") } else { kept };
        fs::write(&metrics, kept).at(&metrics)?;
        t
    } else {
        let generators: Vec<&str> = train.entries.iter().filter_map(|e| e.label.generator()).collect();
        let vocab = Vocab::from_generators(generators);
        let t = Trainer::new(cfg, vocab, manifest_norm(train)?)?;
        fs::write(&metrics, format!("{METRICS_HEADER}\n")).at(&metrics)?;
        t.save(&last)?;
        t
    };

    let policy = cfg.train.decode_errors.into();
    let mut records = Vec::new();
    for epoch in trainer.state.epochs_done..cfg.train.epochs {
        let t = &cfg.train;
        let lr = step_lr(t.lr, epoch, t.step_epochs, t.gamma);
        let mut sum = LossParts::default();
        let mut n = 0.0;
        let iter = BatchIter::new(train, t.b, derive_seed(t.seed, 1000 + epoch as u64), Mode::Train)?.with_policy(policy);
        for batch in iter {
            let parts = trainer.train_step(&batch?, lr)?;
            sum.ce += parts.ce;
            sum.kl += parts.kl;
            sum.cmc += parts.cmc;
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::Config(format!("training manifest has fewer than b={} usable images", t.b)));
        }
        let (val_acc, val_auc) = match val {
            Some(v) => {
                let s = score_manifest(&trainer.model, v, cfg.eval.batch)?;
                (Some(accuracy(&s, cfg.eval.threshold)?), auc(&s).ok())
            }
            None => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            lr,
            ce: sum.ce / n,
            kl: sum.kl / n,
            cmc: sum.cmc / n,
            val_acc,
            val_auc,
        };
        let mut f = fs::OpenOptions::new().append(true).open(&metrics).at(&metrics)?;
        std::io::Write::write_all(&mut f, format!("{}\n", rec.to_row()).as_bytes()).at(&metrics)?;
        trainer.state.epochs_done = epoch + 1;
        let improved = match (val_auc, trainer.state.best_auc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            trainer.state.best_auc = val_auc;
        }
        trainer.save(&last)?;
        if improved || !best.exists() {
            trainer.save(&best)?;
        }
        records.push(rec);
    }
    if !best.exists() {
        trainer.save(&best)?;
    }
    Ok(FitReport {
        records,
        best_auc: trainer.state.best_auc,
        last,
        best,
        metrics,
    })
}
