//! Synthetic end-to-end run: `toy_run <p_signal> <seed> [key=value ...]`.
use std::time::Instant;

use mfclip::config::RunConfig;
use mfclip::synthetic::make_synthetic_dataset;
use mfclip::train::fit;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let p: f64 = args.first().map_or(0.6, |s| s.parse().unwrap());
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let overrides: Vec<String> = args.iter().skip(2).cloned().collect();
    let mut cfg = RunConfig::toy();
    cfg.train.epochs = 20;
    cfg.train.seed = seed;
    let cfg = cfg.apply_overrides(&overrides).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = make_synthetic_dataset(&dir.path().join("data"), 256, 256, p, seed).unwrap();
    let (tr, va) = m.split_stratified(0.75, seed);
    let t = Instant::now();
    let rep = fit(&cfg, &tr, Some(&va), &dir.path().join("run")).unwrap();
    print!("{}", std::fs::read_to_string(&rep.metrics).unwrap());
    println!("best_auc {:?} elapsed {:?}", rep.best_auc, t.elapsed());
}
