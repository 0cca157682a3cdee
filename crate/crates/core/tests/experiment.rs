//! End-to-end experiment runs over synthetic blob datasets written to disk.

use drstage_core::ingest::{load_manifest, PlanMode};
use drstage_core::model::{BackboneConfig, HeadConfig};
use drstage_core::preprocess::AugmentConfig;
use drstage_core::synth::write_blob_dataset;
use drstage_core::train::{run_experiment, EvalSettings, ExperimentConfig, TrainConfig};

fn micro_backbone() -> BackboneConfig {
    BackboneConfig {
        image_side: 16,
        patch_side: 8,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        ..BackboneConfig::toy()
    }
}

fn experiment_config(mode: PlanMode, target: Option<&str>, seed: u64) -> ExperimentConfig {
    let backbone = micro_backbone();
    let head = HeadConfig {
        in_dim: backbone.embed_dim,
        hidden_dim: 16,
    };
    ExperimentConfig {
        mode,
        target_domain: target.map(str::to_string),
        backbone,
        head,
        train: TrainConfig {
            initial_lr: 1e-3,
            max_epochs: 3,
            ..Default::default()
        },
        augment: None,
        eval: EvalSettings {
            bootstrap_resamples: 25,
            ..Default::default()
        },
        black_threshold: 10.0,
        cache_dir: None,
        seed,
    }
}

#[test]
fn multi_source_run_evaluates_only_the_target_domain() {
    let dir = tempfile::tempdir().unwrap();
    let manifests: Vec<_> = ["doma", "domb", "domc"]
        .iter()
        .map(|id| {
            let path = write_blob_dataset(&dir.path().join(id), id, 15, 16, 3).unwrap();
            load_manifest(&path).unwrap()
        })
        .collect();

    let cfg = experiment_config(PlanMode::MultiSource, Some("domc"), 11);
    let run_dir = dir.path().join("run");
    let record = run_experiment(&manifests, &cfg, &run_dir).unwrap();

    assert!(!record.predictions.is_empty());
    assert!(record.predictions.iter().all(|p| p.dataset_id == "domc"));
    record.plan.validate().unwrap();
    assert!(record
        .plan
        .source_train
        .iter()
        .all(|s| s.dataset_id != "domc"));

    for artifact in [
        "config.json",
        "plan.json",
        "history.csv",
        "best.ckpt",
        "report.json",
        "confusion.csv",
        "flags.csv",
        "resamples.csv",
        "predictions.csv",
        "metadata.json",
    ] {
        assert!(run_dir.join(artifact).exists(), "{artifact} missing");
    }
}

#[test]
fn single_source_run_carves_a_held_out_test() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_blob_dataset(&dir.path().join("solo"), "solo", 30, 16, 5).unwrap();
    let manifest = load_manifest(&path).unwrap();

    let cfg = experiment_config(PlanMode::SingleSource, None, 4);
    let record = run_experiment(std::slice::from_ref(&manifest), &cfg, &dir.path().join("run")).unwrap();

    assert_eq!(record.plan.target_domain, None);
    assert!(!record.predictions.is_empty());
    // Held-out test metrics only: evaluated ids never appear in train/val.
    let eval_ids: Vec<&str> = record
        .predictions
        .iter()
        .map(|p| p.sample_id.as_str())
        .collect();
    for s in record
        .plan
        .source_train
        .iter()
        .chain(record.plan.joint_val.iter())
    {
        assert!(!eval_ids.contains(&s.sample_id.as_str()));
    }
    assert_eq!(record.report.sample_count, record.predictions.len());
}

#[test]
fn augmented_run_with_cache_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_blob_dataset(&dir.path().join("aug"), "aug", 20, 16, 9).unwrap();
    let manifest = load_manifest(&path).unwrap();

    let mut cfg = experiment_config(PlanMode::SingleSource, None, 21);
    cfg.augment = Some(AugmentConfig::default());
    cfg.cache_dir = Some(dir.path().join("cache"));

    let a = run_experiment(std::slice::from_ref(&manifest), &cfg, &dir.path().join("run-a")).unwrap();
    // Second run hits the preprocessing cache; artifacts must match anyway.
    let b = run_experiment(&[manifest], &cfg, &dir.path().join("run-b")).unwrap();

    let hist_a = std::fs::read(dir.path().join("run-a/history.csv")).unwrap();
    let hist_b = std::fs::read(dir.path().join("run-b/history.csv")).unwrap();
    assert_eq!(hist_a, hist_b);
    assert_eq!(a.report.mse, b.report.mse);
    assert!(dir.path().join("cache").read_dir().unwrap().next().is_some());
}
