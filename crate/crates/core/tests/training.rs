mod common;

use std::fs;

use mfclip::data::DatasetManifest;
use mfclip::model::Mfclip;
use mfclip::nn::{Graph, Tensor};
use mfclip::synthetic::make_synthetic_dataset;
use mfclip::train::{fit, Trainer};
use mfclip::vision::ImageNorm;
use mfclip::Error;

fn values(m: &Mfclip) -> Vec<Tensor> {
    m.store.iter().map(|(_, p)| p.value.clone()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = common::toy(4);
    let mut t = Trainer::new(&cfg, common::vocab(), ImageNorm::default()).unwrap();
    let before = values(&t.model);
    t.train_step(&common::batch(4, 1, 0.5), 0.0).unwrap();
    assert_eq!(values(&t.model), before);
}

#[test]
fn repeated_batch_loss_falls_across_every_fifty_step_window() {
    let cfg = common::toy(4);
    let mut t = Trainer::new(&cfg, common::vocab(), ImageNorm::default()).unwrap();
    let batch = common::batch(4, 2, 0.5);
    let losses: Vec<f64> = (0..200).map(|_| t.train_step(&batch, cfg.train.lr).unwrap().total).collect();
    for i in 0..150 {
        assert!(losses[i + 50] < losses[i], "step {i}: {} -> {}", losses[i], losses[i + 50]);
    }
}

#[test]
fn ce_only_toggles_match_a_hand_built_classifier() {
    let mut cfg = common::toy(4);
    cfg.train.losses.kl = false;
    cfg.train.losses.cmc = false;
    let t = Trainer::new(&cfg, common::vocab(), ImageNorm::default()).unwrap();
    let batch = common::batch(4, 3, 0.5);
    let (images, labels) = common::parts(&batch);
    let (_, grads) = t.gradients(&images, &labels).unwrap();

    // Oracle: vision encoder, head, then -(1/b) sum_i log softmax(z_i)[y_i].
    let m = &t.model;
    let mut g = Graph::with_params(&m.store);
    let mve = m.mve(&mut g, &images).unwrap();
    let z = m.head.forward(&mut g, mve.x_v);
    let ls = g.log_softmax(z);
    let mask = Tensor::from_fn(&[4, 2], |k| if labels[k / 2].one_hot().class_index() == k % 2 { 1.0 } else { 0.0 });
    let mask = g.input(mask);
    let picked = g.mul(ls, mask);
    let s = g.sum(picked);
    let loss = g.scale(s, -0.25);
    let oracle = g.backward(loss);

    for (id, p) in m.store.iter() {
        match (grads.param(id), oracle.param(id)) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}: {x} vs {y}", p.name);
                }
            }
            (a, b) => panic!("{}: gradient presence differs ({} vs {})", p.name, a.is_some(), b.is_some()),
        }
    }
    assert!(m.store.iter().filter(|(id, _)| grads.param(*id).is_some()).all(|(_, p)| !p.name.starts_with("fle.")));
}

#[test]
fn weight_decay_exclusions() {
    let cfg = common::toy(4);
    let m = Mfclip::new(&cfg.model, cfg.train.components, 4, common::vocab(), 0).unwrap();
    for (_, p) in m.store.iter() {
        let last = p.name.rsplit('.').next().unwrap();
        let excluded = matches!(last, "pos" | "cls" | "log_tau" | "A") || p.name.contains(".ln");
        assert_eq!(p.decay, !excluded, "{}", p.name);
    }
}

#[test]
fn non_finite_loss_names_the_batch() {
    let cfg = common::toy(2);
    let mut t = Trainer::new(&cfg, common::vocab(), ImageNorm::default()).unwrap();
    let batch = common::batch(2, 4, 0.5);
    let id = t.model.store.id("head.b").unwrap();
    t.model.store.value_mut(id).data_mut()[0] = f64::NAN;
    match t.train_step(&batch, 1e-4) {
        Err(Error::NonFiniteLoss { source_ids }) => assert_eq!(source_ids, vec!["s4-0".to_string(), "s4-1".to_string()]),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|p| p.total)),
    }
}

fn small_dataset(dir: &std::path::Path) -> DatasetManifest {
    make_synthetic_dataset(&dir.join("data"), 6, 6, 0.5, 21).unwrap()
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let mut cfg = common::toy(4);
    cfg.train.epochs = 0;
    let rep = fit(&cfg, &m, None, &dir.path().join("run")).unwrap();
    assert!(rep.records.is_empty());
    let saved = Trainer::load(&rep.last).unwrap();
    assert_eq!(saved.state.epochs_done, 0);
    assert_eq!(saved.adam.t, 0);
    let fresh = Mfclip::new(&cfg.model, cfg.train.components, 4, saved.model.vocab.clone(), mfclip::synthetic::derive_seed(cfg.train.seed, 0)).unwrap();
    assert_eq!(values(&saved.model), values(&fresh));
    assert_eq!(fs::read_to_string(&rep.metrics).unwrap().lines().count(), 1);
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let (tr, va) = m.split_stratified(0.67, 1);
    let mut cfg = common::toy(4);
    cfg.train.epochs = 2;
    let straight = fit(&cfg, &tr, Some(&va), &dir.path().join("a")).unwrap();

    let mut first = cfg.clone();
    first.train.epochs = 1;
    fit(&first, &tr, Some(&va), &dir.path().join("b")).unwrap();
    let resumed = fit(&cfg, &tr, Some(&va), &dir.path().join("b")).unwrap();
    assert_eq!(resumed.records.len(), 1);

    let a = Trainer::load(&straight.last).unwrap();
    let b = Trainer::load(&resumed.last).unwrap();
    assert_eq!(values(&a.model), values(&b.model));
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.state, b.state);
    assert_eq!(fs::read_to_string(&straight.metrics).unwrap(), fs::read_to_string(&resumed.metrics).unwrap());
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let mut cfg = common::toy(4);
    cfg.train.epochs = 1;
    fit(&cfg, &m, None, &dir.path().join("run")).unwrap();
    cfg.train.lr *= 2.0;
    assert!(matches!(fit(&cfg, &m, None, &dir.path().join("run")), Err(Error::Config(_))));
}

#[test]
fn single_class_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let reals = DatasetManifest::new(
        m.entries.iter().filter(|e| !e.label.is_fake()).cloned().collect(),
        m.split,
        "x",
    );
    assert!(fit(&common::toy(4), &reals, None, &dir.path().join("run")).is_err());
}
