mod common;

use common::{tiny_dataset, tiny_train_config};
use cvgl_harness::checkpoint::{namespace_hash, Checkpoint};
use cvgl_harness::eval::{evaluate_both, Direction, HeldOut};
use cvgl_harness::train::{init_checkpoint, train, train_from, train_until};
use cvgl_harness::{HarnessError, TrainConfig};

#[test]
fn one_epoch_visits_every_a_view_once() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 1);
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_train_config(1)
    };
    let out = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].loss.is_finite());
    assert_eq!(out.checkpoint.optimizer.step, 4);
    assert_eq!(out.checkpoint.epoch, 1);
    let routed: usize = out.log[0].expert_counts.iter().sum();
    // Two rounds of two batches of three pairs, four tokens per image.
    assert_eq!(routed, 4 * 2 * 12);
}

#[test]
fn batch_of_one_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 1);
    let cfg = TrainConfig {
        batch_size: 1,
        ..tiny_train_config(1)
    };
    let err = train(&cfg, &data, |_| panic!("no epoch may run")).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
}

#[test]
fn image_size_mismatch_is_refused_before_any_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 1);
    let cfg = TrainConfig {
        image_size: 32,
        ..tiny_train_config(1)
    };
    let err = train(&cfg, &data, |_| panic!("no epoch may run")).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
}

#[test]
fn frozen_backbone_is_untouched_and_trainables_move() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 2);
    let cfg = tiny_train_config(2);
    let before = init_checkpoint(&cfg).unwrap();
    let out = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(namespace_hash(&before.params, "backbone"), out.backbone_hash);
    assert_eq!(namespace_hash(&out.checkpoint.params, "backbone"), out.backbone_hash);
    for ns in ["adapter", "mscr", "aggregator", "loss"] {
        assert_ne!(
            namespace_hash(&before.params, ns),
            namespace_hash(&out.checkpoint.params, ns),
            "{ns} did not train"
        );
    }
}

#[test]
fn identical_seeds_give_identical_runs_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 3);
    let cfg = tiny_train_config(3);
    let a = train(&cfg, &data, |_| {}).unwrap();
    let b = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let strip = |log: &[cvgl_harness::train::EpochLog]| {
        log.iter().map(|e| (e.loss.to_bits(), e.expert_counts.clone())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.log), strip(&b.log));

    // One epoch, a save/load cycle, then the second epoch.
    let first = train_until(init_checkpoint(&cfg).unwrap(), &data, 1, |_| {}).unwrap();
    assert_eq!(first.checkpoint.epoch, 1);
    let path = dir.path().join("half.ckpt");
    first.checkpoint.save(&path).unwrap();
    let resumed = train_from(Checkpoint::load(&path, Some(&cfg)).unwrap(), &data, |_| {}).unwrap();
    assert_eq!(resumed.checkpoint.to_bytes(), a.checkpoint.to_bytes());
}

#[test]
fn ablation_flags_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 4);
    let cfg = TrainConfig {
        use_adapter: false,
        use_mscr: false,
        use_moe: false,
        ..tiny_train_config(4)
    };
    let out = train(&cfg, &data, |_| {}).unwrap();
    assert!(out.log.iter().all(|e| e.loss.is_finite()));
    assert!(out.checkpoint.params.names().all(|n| !n.starts_with("adapter") && !n.starts_with("mscr")));
    assert!(out.checkpoint.params.get("aggregator.gate.w").is_none());
}

#[test]
fn gallery_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 5);
    let cfg = tiny_train_config(5);
    let ckpt = init_checkpoint(&cfg).unwrap();
    let held = HeldOut::encode(&ckpt.params, &cfg, &data).unwrap();
    let mirror = HeldOut {
        a: held.b.clone(),
        a_locations: held.b_locations.clone(),
        ..held.clone()
    };
    for d in Direction::BOTH {
        let e = mirror.evaluate(d, &[1]).unwrap();
        assert_eq!(e.recall(1), Some(1.0));
        assert_eq!(e.metrics.mean_ap, 1.0);
    }
    let (evals, report) = evaluate_both(&held, &[1, 2]).unwrap();
    assert_eq!(evals[0].queries, 6);
    assert_eq!(evals[0].gallery, 3);
    assert!((evals[0].chance_r1 - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(evals[1].queries, 3);
    assert!(report.get_f64("a2b.r@1").is_some());
    assert!(report.get_f64("b2a.map").is_some());
    let back = cvgl_harness::report::Report::parse(&report.to_string(), std::path::Path::new("r")).unwrap();
    assert_eq!(back, report);
}

#[test]
fn descriptors_have_unit_norm() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 6);
    let cfg = tiny_train_config(6);
    let ckpt = train(&cfg, &data, |_| {}).unwrap().checkpoint;
    let held = HeldOut::encode(&ckpt.params, &cfg, &data).unwrap();
    let ids: Vec<u64> = held.a_locations.iter().map(|&l| l as u64).collect();
    let file = cvgl_harness::descriptors::DescriptorFile::from_rows(&held.a, ids).unwrap();
    for i in 0..file.count() {
        let n: f32 = file.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() <= 1e-5, "{n}");
    }
}
