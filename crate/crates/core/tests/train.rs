mod common;

use common::training::{resume_check, small_train};
use common::{desk_scale, tiny_config, PUBLISHED_PRESETS};
use dsmoe::config::preset;
use dsmoe::train::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
use dsmoe::train::Trainer;
use dsmoe::Error;

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let mut t = Trainer::new(tiny_config(), small_train(4)).unwrap();
        (0..4).map(|_| t.step().unwrap().loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let mut other = small_train(4);
    other.seed = 1;
    let mut t = Trainer::new(tiny_config(), other).unwrap();
    let l: Vec<u64> = (0..4).map(|_| t.step().unwrap().loss.to_bits()).collect();
    assert_ne!(l, run());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    for k in [1, 3] {
        let r = resume_check(tiny_config(), small_train(4), k, dir.path()).unwrap();
        assert_eq!(r.continued.to_bits(), r.resumed.to_bits(), "k={k}");
        assert!(r.bytes_stable);
    }
}

#[test]
fn every_preset_round_trips_at_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let mut names: Vec<&str> = PUBLISHED_PRESETS.to_vec();
    names.push("dsmoe-tiny");
    for name in names {
        let cfg = desk_scale(preset(name).unwrap(), 4);
        cfg.ensure_valid().unwrap();
        let r = resume_check(cfg, small_train(2), 10, dir.path()).unwrap();
        assert_eq!(r.continued.to_bits(), r.resumed.to_bits(), "{name}");
        assert!(r.bytes_stable, "{name}");
    }
}

fn saved(dir: &std::path::Path) -> (std::path::PathBuf, CheckpointBundle) {
    let mut t = Trainer::new(tiny_config(), small_train(2)).unwrap();
    t.step().unwrap();
    let path = dir.join("c.dsmk");
    let b = t.to_bundle();
    save_checkpoint(&b, &path).unwrap();
    (path, b)
}

#[test]
fn truncated_and_corrupt_checkpoints_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path());
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn key_mismatch_names_first_divergent_key() {
    let dir = tempfile::tempdir().unwrap();
    let (path, mut b) = saved(dir.path());
    let original = b.weights[3].0.clone();
    b.weights[3].0 = "blocks.9.bogus".into();
    save_checkpoint(&b, &path).unwrap();
    match load_checkpoint(&path) {
        Err(Error::KeyMismatch { expected, found }) => {
            assert_eq!(expected, original);
            assert_eq!(found, "blocks.9.bogus");
        }
        other => panic!("{other:?}"),
    }
    // dropping the last entry is reported too
    let (_, mut b) = saved(dir.path());
    b.weights.pop();
    save_checkpoint(&b, &path).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::KeyMismatch { .. })));
}

#[test]
fn ema_never_feeds_gradients() {
    let mut a = Trainer::new(tiny_config(), small_train(2)).unwrap();
    a.step().unwrap();
    let mut bundle = a.to_bundle();
    for t in &mut bundle.ema {
        t.data_mut().iter_mut().for_each(|x| *x = *x * 3.0 + 1.0);
    }
    let mut b = Trainer::from_bundle(&bundle).unwrap();
    for _ in 0..2 {
        assert_eq!(a.step().unwrap().loss.to_bits(), b.step().unwrap().loss.to_bits());
    }
    assert_eq!(a.model.params().tensors(), b.model.params().tensors());
    assert_ne!(a.ema.shadow(), b.ema.shadow());
}

#[test]
fn metrics_report_every_moe_layer() {
    let mut t = Trainer::new(tiny_config(), small_train(2)).unwrap();
    let m = t.step().unwrap();
    assert_eq!(m.step, 1);
    assert_eq!(m.load_std.len(), tiny_config().moe_blocks().len());
    assert!(m.grad_norm > 0.0 && m.loss.is_finite());
    assert!(m.experts_active_fraction > 0.0 && m.experts_active_fraction <= 1.0);
}
