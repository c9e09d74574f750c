//! Run lifecycle: determinism, checkpoints, resume and the self-training hand-off.

mod common;

use std::fs;

use nightseg_core::nets::ArchConfig;
use nightseg_core::selftrain::SelfTrainConfig;
use nightseg_core::trainer::{self, checkpoint_dir, generate_pseudo, read_metrics, Checkpoint, RunPaths, Stage, TrainConfig};
use nightseg_core::types::ClassTaxonomy;
use nightseg_core::Error;

fn paths(out: &std::path::Path) -> RunPaths {
    RunPaths {
        data: out.to_path_buf(),
        out: out.to_path_buf(),
        resume: None,
    }
}

fn warm_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 6,
        checkpoint_every: 3,
        crop_size: Some(16),
        ..common::tiny_config(seed)
    }
}

#[test]
fn same_seed_gives_identical_logs_and_weights() {
    let tax = ClassTaxonomy::synthetic();
    let data = common::small_split(4, 32, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = trainer::run_on(&warm_cfg(5), &tax, &data, &paths(a.path())).unwrap();
    let tb = trainer::run_on(&warm_cfg(5), &tax, &data, &paths(b.path())).unwrap();
    let la = fs::read_to_string(a.path().join(trainer::METRICS_FILE)).unwrap();
    let lb = fs::read_to_string(b.path().join(trainer::METRICS_FILE)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.lines().count(), 6);
    assert_eq!(ta.bundle.store.hash_all(), tb.bundle.store.hash_all());

    let c = tempfile::tempdir().unwrap();
    trainer::run_on(&warm_cfg(6), &tax, &data, &paths(c.path())).unwrap();
    assert_ne!(fs::read_to_string(c.path().join(trainer::METRICS_FILE)).unwrap(), la);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tax = ClassTaxonomy::synthetic();
    let data = common::small_split(4, 32, 2);
    let full = tempfile::tempdir().unwrap();
    let t_full = trainer::run_on(&warm_cfg(7), &tax, &data, &paths(full.path())).unwrap();

    // pick up from the step-3 checkpoint in a fresh directory holding the full
    // log; the records past step 3 must be dropped and regenerated identically
    let part = tempfile::tempdir().unwrap();
    fs::copy(full.path().join(trainer::METRICS_FILE), part.path().join(trainer::METRICS_FILE)).unwrap();
    let resumed = RunPaths {
        resume: Some(checkpoint_dir(full.path(), 3)),
        ..paths(part.path())
    };
    let t_res = trainer::run_on(&warm_cfg(7), &tax, &data, &resumed).unwrap();

    assert_eq!(t_res.step, t_full.step);
    for (a, b) in t_full.bundle.store.entries().iter().zip(t_res.bundle.store.entries()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert!((x - y).abs() <= 1e-6, "{} drifted", a.name);
        }
    }
    let m_full = read_metrics(&full.path().join(trainer::METRICS_FILE)).unwrap();
    let m_res = read_metrics(&part.path().join(trainer::METRICS_FILE)).unwrap();
    assert_eq!(m_full.len(), m_res.len());
    for (a, b) in m_full.iter().zip(&m_res) {
        assert_eq!(a.step, b.step);
        assert!((a.losses.total() - b.losses.total()).abs() <= 1e-6);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let tax = ClassTaxonomy::synthetic();
    let data = common::small_split(2, 32, 3);
    let dir = tempfile::tempdir().unwrap();
    let t = trainer::run_on(&warm_cfg(8), &tax, &data, &paths(dir.path())).unwrap();
    let ck = Checkpoint::load(&checkpoint_dir(dir.path(), 6)).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.param_hash, t.bundle.store.hash_all());
    let b = ck.bundle(&ArchConfig::tiny(9)).unwrap();
    assert_eq!(b.store.hash_all(), t.bundle.store.hash_all());
    assert!(checkpoint_dir(dir.path(), 3).join("checkpoint.json").is_file());
}

#[test]
fn architecture_mismatch_is_rejected() {
    let tax = ClassTaxonomy::synthetic();
    let data = common::small_split(2, 32, 4);
    let dir = tempfile::tempdir().unwrap();
    trainer::run_on(&warm_cfg(9), &tax, &data, &paths(dir.path())).unwrap();
    let ck = Checkpoint::load(&checkpoint_dir(dir.path(), 6)).unwrap();
    let mut other = ArchConfig::tiny(9);
    other.cls_width += 1;
    assert!(matches!(ck.bundle(&other), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn selftrain_needs_a_warmup_checkpoint() {
    let tax = ClassTaxonomy::synthetic();
    let cfg = TrainConfig {
        stage: Stage::Selftrain,
        ..common::tiny_config(1)
    };
    assert!(matches!(cfg.validate(&tax), Err(Error::Config(_))));

    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        stage: Stage::Selftrain,
        warmup_checkpoint: Some(dir.path().join("nope")),
        pseudo_dir: Some(dir.path().join("pseudo")),
        ..common::tiny_config(1)
    };
    let data = common::small_split(2, 32, 5);
    assert!(trainer::run_on(&cfg, &tax, &data, &paths(dir.path())).is_err());
}

#[test]
fn warmup_to_selftrain_hand_off() {
    let tax = ClassTaxonomy::synthetic();
    let data = common::small_split(3, 32, 6);
    let warm = tempfile::tempdir().unwrap();
    let t = trainer::run_on(&warm_cfg(10), &tax, &data, &paths(warm.path())).unwrap();

    let pseudo = warm.path().join("pseudo");
    let st = SelfTrainConfig {
        confidence_threshold: 0.2,
        ..SelfTrainConfig::default()
    };
    let side = generate_pseudo(&t.bundle, &data, &tax, &st, &pseudo).unwrap();
    assert_eq!(side.samples, 3);
    assert!(pseudo.join("pseudo.json").is_file());
    for s in &data {
        assert!(pseudo.join("night").join(format!("{}.png", s.id)).is_file());
        assert!(pseudo.join("day_ref").join(format!("{}.png", s.id)).is_file());
    }

    let cfg = TrainConfig {
        stage: Stage::Selftrain,
        steps: 3,
        warmup_checkpoint: Some(checkpoint_dir(warm.path(), 6)),
        pseudo_dir: Some(pseudo.clone()),
        selftrain: st.clone(),
        ..warm_cfg(10)
    };
    let out = tempfile::tempdir().unwrap();
    let s = trainer::run_on(&cfg, &tax, &data, &paths(out.path())).unwrap();
    let recs = read_metrics(&out.path().join(trainer::METRICS_FILE)).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.stage == Stage::Selftrain && r.online.len() == cfg.batch_size));
    assert_ne!(s.bundle.store.hash_all(), t.bundle.store.hash_all());

    // a self-training checkpoint cannot seed another self-training run
    let bad = TrainConfig {
        warmup_checkpoint: Some(checkpoint_dir(out.path(), 3)),
        ..cfg.clone()
    };
    assert!(trainer::run_on(&bad, &tax, &data, &paths(tempfile::tempdir().unwrap().path())).is_err());

    // a missing pseudo-label names the sample
    let victim = &data[1].id;
    fs::remove_file(pseudo.join("night").join(format!("{victim}.png"))).unwrap();
    match trainer::run_on(&cfg, &tax, &data, &paths(out.path())) {
        Err(Error::MissingPseudoLabel(id)) => assert_eq!(&id, victim),
        other => panic!("expected a missing pseudo-label error, got {other:?}"),
    }
}

#[test]
fn config_toml_round_trip() {
    let cfg = TrainConfig {
        crop_size: Some(64),
        ..TrainConfig::default()
    };
    let back: TrainConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let partial: TrainConfig = toml::from_str("steps = 5\n[weights]\nadv = 0.0\n").unwrap();
    assert_eq!(partial.steps, 5);
    assert_eq!(partial.weights.adv, 0.0);
    assert_eq!(partial.weights.seg, 1.25);
}
