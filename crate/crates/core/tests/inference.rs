mod common;

use mfclip::model::Mfclip;
use mfclip::nn::{Graph, Tensor};
use mfclip::vision::ImageNorm;

fn model(seed: u64) -> Mfclip {
    let cfg = common::toy(4);
    let mut m = Mfclip::new(&cfg.model, cfg.train.components, 4, common::vocab(), seed).unwrap();
    m.norm = ImageNorm {
        mean: [0.5, 0.45, 0.4],
        std: [0.2, 0.25, 0.3],
    };
    m
}

#[test]
fn probabilities_are_rows_summing_to_one_and_repeatable() {
    let m = model(1);
    let batch = common::batch(5, 8, 0.4);
    let (images, _) = common::parts(&batch);
    let p = m.infer(&images).unwrap();
    assert_eq!(p.len(), 5);
    for r in &p {
        assert!((r[0] + r[1] - 1.0).abs() < 1e-6);
    }
    assert_eq!(m.infer(&images).unwrap(), p);
}

#[test]
fn inference_matches_hand_composition() {
    let m = model(2);
    let batch = common::batch(3, 9, 0.4);
    let (images, _) = common::parts(&batch);
    let got = m.infer(&images).unwrap();

    let mut g = Graph::with_params(&m.store);
    let x = g.input(mfclip::vision::image_batch(&images, &m.norm).unwrap());
    let x_i = m.ie.forward(&mut g, x);
    let noise = g.input(m.pre.residuals(&images).unwrap());
    let local = m.ne.backbone(&mut g, noise);
    let tokens = m.ne.tokenize(&mut g, local).unwrap();
    let n_n = m.ne.not_forward(&mut g, tokens);
    let (xi, nn) = (g.value(x_i).clone(), g.value(n_n).clone());

    // Head and softmax by scalar loops.
    let w = m.store.value(m.store.id("head.w").unwrap()).data().to_vec();
    let b = m.store.value(m.store.id("head.b").unwrap()).data().to_vec();
    let d = m.cfg.d;
    for (i, row) in got.iter().enumerate() {
        let xv: Vec<f64> = (0..d).map(|k| xi.data()[i * d + k] + nn.data()[i * d + k]).collect();
        let z: Vec<f64> = (0..2).map(|o| b[o] + (0..d).map(|k| w[k * 2 + o] * xv[k]).sum::<f64>()).collect();
        let mx = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s = e[0] + e[1];
        assert!((row[0] - e[0] / s).abs() < 1e-12 && (row[1] - e[1] / s).abs() < 1e-12);
    }
}

#[test]
fn inference_reads_no_text_branch_parameters() {
    let m = model(3);
    let batch = common::batch(2, 10, 0.4);
    let (images, _) = common::parts(&batch);
    m.store.clear_access_log();
    m.infer(&images).unwrap();
    let touched = m.store.accessed_names();
    assert!(!touched.is_empty());
    for n in &touched {
        assert!(n.starts_with("ie.") || n.starts_with("ne.") || n.starts_with("head."), "inference read {n}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(4);
    m.save(dir.path()).unwrap();
    let back = Mfclip::load(dir.path(), &m.cfg, m.components, 4).unwrap();
    let batch = common::batch(4, 11, 0.4);
    let (images, _) = common::parts(&batch);
    assert_eq!(back.scores(&images, 3).unwrap(), m.scores(&images, 3).unwrap());
    assert_eq!(back.norm, m.norm);
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(5);
    m.save(dir.path()).unwrap();
    let mut other = m.cfg.clone();
    other.d = 32;
    assert!(Mfclip::load(dir.path(), &other, m.components, 4).is_err());
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let m = model(6);
    let small = Tensor::zeros(&[3, 112, 112]);
    assert!(m.infer(&[&small]).is_err());
}
