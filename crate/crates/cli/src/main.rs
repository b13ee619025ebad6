use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfclip::config::RunConfig;
use mfclip::data::{load_image, save_png, BatchIter, DatasetManifest, Mode};
use mfclip::eval::PerturbKind;
use mfclip::ftg::generate_prompts;
use mfclip::nn::Tensor;
use mfclip::patch::{crop, patch_scores, select_richest, GlcmParams};
use mfclip::protocol::{robustness_curve, run_protocol};
use mfclip::render::{heatmap, hstack, line_plot, matrix_tsv, residual_png16, save_image, ResidualStats};
use mfclip::srm::SrmFilterBank;
use mfclip::synthetic::make_synthetic_dataset;
use mfclip::taxonomy::HierLabel;
use mfclip::train::{fit, load_checkpoint};
use mfclip::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mfclip", version, about = "Face forgery detection with fine-grained language supervision")]
struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// `section.key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Start from the small desk-scale model instead of the full-size one.
    #[arg(long, global = true)]
    toy: bool,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector and write `last`/`best` checkpoints plus a metric log.
    Train(TrainArgs),
    /// Score test manifests; optionally run the corruption suite.
    Eval(EvalArgs),
    /// Print real/fake probabilities for images.
    Infer {
        /// Checkpoint directory (`run/best` or `run/last`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Print the four prompt sentences for a label such as `real` or `fake,FS,GAN,FSLSD`.
    Prompts {
        #[arg(long)]
        label: String,
    },
    /// Score every non-overlapping patch by GLCM homogeneity and report the richest.
    SelectPatch {
        #[arg(long)]
        image: PathBuf,
        /// Patch side; must tile the 224x224 image.
        #[arg(long, default_value_t = 112)]
        p: usize,
        /// Write every patch score as TSV.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
        /// Write the richest patch as PNG.
        #[arg(long)]
        crop: Option<PathBuf>,
    },
    /// Write the SRM residual of the richest patch as a 16-bit PNG with a stats sidecar.
    SrmDump {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 112)]
        p: usize,
        #[arg(long, default_value = "srm.png")]
        out: PathBuf,
    },
    /// Dump gated and ungated vision-to-language similarities for one batch.
    Simdump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose first `b` rows form the batch.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "simdump")]
        out: PathBuf,
    },
    /// Generate the separable synthetic face-like dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n_real: usize,
        #[arg(long, default_value_t = 256)]
        n_fake: usize,
        /// Forgery signature amplitude in [0, 1]; 0 makes the classes identical.
        #[arg(long, default_value_t = 1.0)]
        p_signal: f64,
        /// Also write `train.tsv` and `test.tsv` holding this fraction / the rest.
        #[arg(long)]
        split: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest (TSV: path, authenticity, type, family, generator).
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest; enables `best` selection by AUC.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory. An existing one is resumed.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One or more test manifests.
    #[arg(long, num_args = 1.., required = true)]
    test: Vec<PathBuf>,
    /// `all` or a comma-separated list of corruption kinds.
    #[arg(long)]
    perturb: Option<String>,
    /// Results table path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label for the training set.
    #[arg(long, default_value = "train")]
    train_tag: String,
}

/// Usage-class failures exit with 1, everything else with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = if cli.toy { RunConfig::toy() } else { RunConfig::default() };
    if let Some(path) = &cli.config {
        if !path.is_file() {
            return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
        }
        cfg = cfg.merge_file(path).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg = cfg.apply_overrides(&cli.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
}

fn load_manifest(path: &Path) -> std::result::Result<DatasetManifest, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("manifest {} does not exist", path.display())));
    }
    Ok(DatasetManifest::load(path)?)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match &cli.cmd {
        Command::Train(a) => {
            let cfg = resolve_config(&cli)?;
            echo(&cfg);
            let train = load_manifest(&a.train)?;
            let val = a.val.as_deref().map(load_manifest).transpose()?;
            fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
            let resolved = a.out.join("resolved.toml");
            fs::write(&resolved, cfg.to_toml()).map_err(|e| io_err(&resolved, e))?;
            let rep = fit(&cfg, &train, val.as_ref(), &a.out)?;
            for r in &rep.records {
                println!("{}", r.to_row());
            }
            println!("# best val AUC: {}", rep.best_auc.map_or("-".into(), |v| v.to_string()));
        }
        Command::Eval(a) => {
            let (ckpt_cfg, model) = load_checkpoint(&a.checkpoint)?;
            let cfg = layered_over(&cli, ckpt_cfg)?;
            echo(&cfg);
            let mut tests = Vec::new();
            for p in &a.test {
                let name = p.file_stem().map_or("test".into(), |s| s.to_string_lossy().into_owned());
                tests.push((name, load_manifest(p)?));
            }
            let table = run_protocol(&model, &a.train_tag, &tests, cfg.eval.batch, cfg.eval.threshold)?;
            let text = table.to_tsv();
            match &a.out {
                Some(p) => fs::write(p, &text).map_err(|e| io_err(p, e))?,
                None => print!("{text}"),
            }
            if let Some(spec) = &a.perturb {
                let kinds = parse_kinds(spec)?;
                let base = a.out.clone().unwrap_or_else(|| PathBuf::from("results.tsv"));
                for (name, m) in &tests {
                    let curve = robustness_curve(&model, m, &kinds, cfg.train.seed, cfg.eval.batch)?;
                    let tsv = base.with_file_name(format!("robustness_{name}.tsv"));
                    fs::write(&tsv, curve.to_tsv()).map_err(|e| io_err(&tsv, e))?;
                    let lo = curve.mean.iter().copied().fold(1.0, f64::min).min(0.5);
                    let png = tsv.with_extension("png");
                    save_image(&line_plot(&[&curve.mean[..]], lo, 1.0, 480, 320), &png)?;
                    eprintln!("wrote {} and {}", tsv.display(), png.display());
                }
            }
        }
        Command::Infer { checkpoint, images } => {
            let (_, model) = load_checkpoint(checkpoint)?;
            let loaded: Vec<Tensor> = images.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = loaded.iter().collect();
            println!("path\tp_real\tp_fake");
            for chunk in refs.chunks(32).zip(images.chunks(32)) {
                for (p, path) in model.infer(chunk.0)?.iter().zip(chunk.1) {
                    println!("{}\t{}\t{}", path.display(), p[0], p[1]);
                }
            }
        }
        Command::Prompts { label } => {
            let label: HierLabel = label.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            for s in generate_prompts(&label).sentences {
                println!("{s}");
            }
        }
        Command::SelectPatch { image, p, dump_scores, crop: crop_out } => {
            let img = load_image(image)?;
            let params = GlcmParams::default();
            let scores = patch_scores(&img, *p, &params).map_err(usage_if_config)?;
            let best = select_richest(&img, *p, &params)?;
            if let Some(path) = dump_scores {
                let per_row = img.shape()[2] / p;
                let mut text = String::from("index\trow\tcol\thomogeneity\n");
                for (i, s) in scores.iter().enumerate() {
                    text.push_str(&format!("{i}\t{}\t{}\t{s}\n", (i / per_row) * p, (i % per_row) * p));
                }
                text.push_str(&format!("# selected\t{}\t{}\t{}\n", best.index, best.coords.0, best.coords.1));
                fs::write(path, text).map_err(|e| io_err(path, e))?;
            }
            if let Some(path) = crop_out {
                save_png(&crop(&img, best.coords.0, best.coords.1, *p), path)?;
            }
            println!("index\t{}\nrow\t{}\ncol\t{}\nhomogeneity\t{}", best.index, best.coords.0, best.coords.1, best.homogeneity);
        }
        Command::SrmDump { image, p, out } => {
            let cfg = resolve_config(&cli)?;
            let img = load_image(image)?;
            let best = select_richest(&img, *p, &cfg.model.glcm).map_err(usage_if_config)?;
            let bank = SrmFilterBank::with_q(cfg.model.srm_q);
            let res = bank.extract(&best.pixels);
            save_image(&residual_png16(&res, bank.q())?, out)?;
            let side = out.with_extension("txt");
            let stats = ResidualStats::of(&res);
            fs::write(&side, stats.to_text(bank.q())).map_err(|e| io_err(&side, e))?;
            print!("{}", stats.to_text(bank.q()));
        }
        Command::Simdump { checkpoint, manifest, out } => {
            let (ckpt_cfg, model) = load_checkpoint(checkpoint)?;
            echo(&ckpt_cfg);
            let m = load_manifest(manifest)?;
            let batch = BatchIter::new(&m, model.batch, 0, Mode::Eval)?
                .next()
                .transpose()?
                .filter(|b| b.len() == model.batch)
                .ok_or_else(|| Failure::Usage(format!("manifest needs at least b={} images", model.batch)))?;
            let images: Vec<&Tensor> = batch.samples.iter().map(|s| &s.pixels).collect();
            let labels: Vec<HierLabel> = batch.samples.iter().map(|s| s.label.clone()).collect();
            let (gated, ungated) = model.similarity(&images, &labels)?;
            fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
            for (name, t) in [("s_v2l_gated.tsv", &gated), ("s_v2l_ungated.tsv", &ungated)] {
                let p = out.join(name);
                fs::write(&p, matrix_tsv(t)?).map_err(|e| io_err(&p, e))?;
            }
            let cell = (256 / model.batch as u32).max(4);
            let img = hstack(&[heatmap(&ungated, cell)?, heatmap(&gated, cell)?], cell);
            save_image(&img, &out.join("heatmap.png"))?;
            println!("wrote {}", out.display());
        }
        Command::MakeSynthetic { out, n_real, n_fake, p_signal, split } => {
            if !(0.0..=1.0).contains(p_signal) {
                return Err(Failure::Usage(format!("--p-signal must lie in [0, 1], got {p_signal}")));
            }
            let seed = cli.seed.unwrap_or(0);
            let m = make_synthetic_dataset(out, *n_real, *n_fake, *p_signal, seed)?;
            if let Some(f) = split {
                let (tr, te) = m.split_stratified(*f, seed);
                tr.save(&out.join("train.tsv"))?;
                te.save(&out.join("test.tsv"))?;
            }
            println!("wrote {} images to {}", m.len(), out.display());
        }
    }
    Ok(())
}

/// Evaluation takes the checkpoint's configuration and lets the command
/// line adjust it.
fn layered_over(cli: &Cli, base: RunConfig) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = &cli.config {
        if !path.is_file() {
            return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
        }
        cfg = cfg.merge_file(path).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg = cfg.apply_overrides(&cli.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn parse_kinds(spec: &str) -> std::result::Result<Vec<PerturbKind>, Failure> {
    if spec == "all" {
        return Ok(PerturbKind::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<PerturbKind>().map_err(|e| Failure::Usage(e.to_string())))
        .collect()
}

fn usage_if_config(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Usage(m),
        e => Failure::Runtime(e),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
