use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfclip")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn prompts_for_real_prints_four_sentences() {
    let o = mfclip(&["prompts", "--label", "real"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains("real"));
}

#[test]
fn prompts_name_the_generator() {
    let o = mfclip(&["prompts", "--label", "fake,FS,GAN,FSLSD"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().nth(3).unwrap().contains("FSLSD"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = mfclip(&["--config", "missing.toml", "train", "--train", "x.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
}

#[test]
fn unknown_subcommand_and_key_exit_one() {
    assert_eq!(mfclip(&["frobnicate"]).status.code(), Some(1));
    let o = mfclip(&["--set", "train.nonsense=3", "train", "--train", "x.tsv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_label_is_rejected() {
    assert_eq!(mfclip(&["prompts", "--label", "fake,XYZ"]).status.code(), Some(1));
}

#[test]
fn patch_tools_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mfclip(&["--seed", "3", "make-synthetic", "--out", p(&data), "--n-real", "1", "--n-fake", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let img = data.join("fake_00000.png");

    let scores = dir.path().join("scores.tsv");
    let crop = dir.path().join("crop.png");
    let o = mfclip(&["select-patch", "--image", p(&img), "--p", "112", "--dump-scores", p(&scores), "--crop", p(&crop)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(text.contains("# selected"));
    assert_eq!(image_dims(&crop), (112, 112));

    let o = mfclip(&["select-patch", "--image", p(&img), "--p", "100"]);
    assert_eq!(o.status.code(), Some(1));

    let out = dir.path().join("res.png");
    let o = mfclip(&["srm-dump", "--image", p(&img), "--p", "56", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let side = fs::read_to_string(dir.path().join("res.txt")).unwrap();
    assert!(side.starts_with("min\t") && side.contains("energy\t"));
    let decoded = image_dims(&out);
    assert_eq!(decoded, (56, 56));
}

fn image_dims(path: &Path) -> (u32, u32) {
    // PNG IHDR: width and height are big-endian u32 at bytes 16..24.
    let b = fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    (
        u32::from_be_bytes(b[16..20].try_into().unwrap()),
        u32::from_be_bytes(b[20..24].try_into().unwrap()),
    )
}

/// make-synthetic, train, eval and simdump on a tiny toy run, then a rerun
/// from the echoed configuration.
#[test]
fn pipeline_produces_parseable_results_and_reruns_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mfclip(&["--seed", "5", "make-synthetic", "--out", p(&data), "--n-real", "10", "--n-fake", "10", "--split", "0.6"]);
    assert_eq!(o.status.code(), Some(0));

    let run = dir.path().join("run");
    let train_args = |out: &Path| {
        let mut o = mfclip(&[
            "--toy",
            "--seed",
            "9",
            "--set",
            "train.epochs=2",
            "--set",
            "train.b=4",
            "train",
            "--train",
            p(&data.join("train.tsv")),
            "--val",
            p(&data.join("test.tsv")),
            "--out",
            p(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::mem::take(&mut o.stderr)
    };
    let echoed = String::from_utf8(train_args(&run)).unwrap();
    assert!(echoed.contains("[model]") && echoed.contains("seed = 9"));
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch\tlr\tL_ce\tL_kl\tL_cmc\tval_acc\tval_auc");
    assert_eq!(metrics.lines().count(), 3);

    let rerun = dir.path().join("rerun");
    let o = mfclip(&[
        "--config",
        p(&run.join("resolved.toml")),
        "train",
        "--train",
        p(&data.join("train.tsv")),
        "--val",
        p(&data.join("test.tsv")),
        "--out",
        p(&rerun),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(rerun.join("metrics.tsv")).unwrap(), metrics);

    let results = dir.path().join("results.tsv");
    let o = mfclip(&[
        "eval",
        "--checkpoint",
        p(&run.join("best")),
        "--test",
        p(&data.join("test.tsv")),
        p(&data.join("train.tsv")),
        "--out",
        p(&results),
        "--perturb",
        "blur",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(&results).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    let col = header.iter().position(|h| *h == "AUC").unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let auc: f64 = r.split('\t').nth(col).unwrap().parse().unwrap();
        assert!((0.0..=100.0).contains(&auc));
    }
    let curve = fs::read_to_string(dir.path().join("robustness_test.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 7);

    let o = mfclip(&["infer", "--checkpoint", p(&run.join("best")), p(&data.join("real_00000.png"))]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o).lines().nth(1).unwrap().to_string();
    let probs: Vec<f64> = line.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((probs[0] + probs[1] - 1.0).abs() < 1e-9);

    let sim = dir.path().join("sim");
    let o = mfclip(&["simdump", "--checkpoint", p(&run.join("last")), "--manifest", p(&data.join("test.tsv")), "--out", p(&sim)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let gated = fs::read_to_string(sim.join("s_v2l_gated.tsv")).unwrap();
    assert_eq!(gated.lines().count(), 4);
    assert!(sim.join("heatmap.png").is_file());
}

#[test]
fn eval_with_missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.tsv");
    fs::write(&m, "").unwrap();
    let o = mfclip(&["eval", "--checkpoint", p(&dir.path().join("nope")), "--test", p(&m)]);
    assert_eq!(o.status.code(), Some(2));
}
