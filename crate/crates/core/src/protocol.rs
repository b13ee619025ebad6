//! Cross-set evaluation table and the corruption robustness curve.

use std::fmt::Write as _;

use crate::data::DatasetManifest;
use crate::error::Result;
use crate::eval::{accuracy, auc, apply_perturbation, PerturbKind, PerturbSpec, ScoreSet, LEVELS};
use crate::model::Mfclip;
use crate::nn::Tensor;
use crate::synthetic::derive_seed;
use crate::train::score_manifest;

pub const TABLE_HEADER: &str = "train\ttest\tn\tACC\tAUC";
pub const CURVE_HEADER: &str = "level\tmean_AUC";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub test: String,
    pub n: usize,
    pub acc: f64,
    /// `None` when the test set holds a single class.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub train_tag: String,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Accuracy and AUC as percentages; an undefined AUC prints as `-`.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            let auc = r.auc.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(s, "{}\t{}\t{}\t{:.2}\t{auc}", self.train_tag, r.test, r.n, 100.0 * r.acc);
        }
        s
    }
}

/// Scores every test manifest with the vision-only inference path.
pub fn run_protocol(model: &Mfclip, train_tag: &str, tests: &[(String, DatasetManifest)], chunk: usize, threshold: f64) -> Result<ResultsTable> {
    let mut rows = Vec::with_capacity(tests.len());
    for (name, m) in tests {
        let s = score_manifest(model, m, chunk)?;
        rows.push(ResultRow {
            test: name.clone(),
            n: s.len(),
            acc: accuracy(&s, threshold)?,
            auc: auc(&s).ok(),
        });
    }
    Ok(ResultsTable {
        train_tag: train_tag.to_string(),
        rows,
    })
}

/// AUC per corruption kind and level, plus the level-wise mean over kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessCurve {
    pub per_kind: Vec<(PerturbKind, [f64; LEVELS])>,
    pub mean: [f64; LEVELS],
}

impl RobustnessCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("level");
        for (k, _) in &self.per_kind {
            let _ = write!(s, "\t{k}");
        }
        s.push_str("\tmean_AUC\n");
        for l in 0..LEVELS {
            let _ = write!(s, "{l}");
            for (_, a) in &self.per_kind {
                let _ = write!(s, "\t{}", a[l]);
            }
            let _ = writeln!(s, "\t{}", self.mean[l]);
        }
        s
    }

    pub fn kind(&self, kind: PerturbKind) -> Option<&[f64; LEVELS]> {
        self.per_kind.iter().find(|(k, _)| *k == kind).map(|(_, a)| a)
    }
}

/// Loads every test image once, then scores each corrupted copy. Image `i`
/// under kind `k` uses seed `derive_seed(seed, i)` mixed with the kind, so
/// levels of one kind share their random draws.
pub fn robustness_curve(model: &Mfclip, test: &DatasetManifest, kinds: &[PerturbKind], seed: u64, chunk: usize) -> Result<RobustnessCurve> {
    let mut images = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let s = test.load_sample(i)?;
        labels.push(s.label.is_fake());
        images.push(s.pixels);
    }
    let mut per_kind = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut aucs = [0.0; LEVELS];
        for (level, slot) in aucs.iter_mut().enumerate() {
            let spec = PerturbSpec { kind, level };
            let corrupted: Vec<Tensor> = images
                .iter()
                .enumerate()
                .map(|(i, im)| apply_perturbation(im, spec, derive_seed(derive_seed(seed, i as u64), kind as u64)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = corrupted.iter().collect();
            let s = ScoreSet::new(model.scores(&refs, chunk)?, labels.clone())?;
            *slot = auc(&s)?;
        }
        per_kind.push((kind, aucs));
    }
    let mut mean = [0.0; LEVELS];
    for (l, m) in mean.iter_mut().enumerate() {
        *m = per_kind.iter().map(|(_, a)| a[l]).sum::<f64>() / per_kind.len().max(1) as f64;
    }
    Ok(RobustnessCurve { per_kind, mean })
}
