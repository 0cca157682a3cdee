//! End-to-end tests of the `drstage` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drstage_core::model::{save_checkpoint, BackboneConfig, BackboneKind, HeadConfig, Model};
use drstage_core::preprocess::write_png;
use drstage_core::synth::{blob_image, write_blob_dataset};

fn drstage(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drstage"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

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

fn micro_run_config(manifests: &[PathBuf], mode: &str, target: Option<&str>) -> serde_json::Value {
    serde_json::json!({
        "manifests": manifests,
        "mode": mode,
        "target_domain": target,
        "backbone": micro_backbone(),
        "head": {"in_dim": 8, "hidden_dim": 16},
        "train": {
            "batch_size": 16,
            "initial_lr": 1e-3,
            "weight_decay": 0.04,
            "lr_decay_factor": 0.1,
            "lr_patience_epochs": 4,
            "early_stop_patience_epochs": 10,
            "max_epochs": 2,
            "seed": 0
        },
        "eval": {"bootstrap_resamples": 30},
        "seed": 5,
        "out_dir": "runs",
        "run_id": "t"
    })
}

const HEADER: &str =
    "sample_id,dataset_id,image_path,patient_id,icdr,dme,gradable,age_years,diabetic\n";

#[test]
fn ingest_reports_exclusion_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("toy.csv");
    std::fs::write(
        &manifest,
        format!(
            "{HEADER}a,toy,a.png,,1,,1,44,\nb,toy,b.png,,2,,1,17,\nc,toy,c.png,,0,,1,12,\nd,toy,d.png,,3,,1,,\n"
        ),
    )
    .unwrap();
    let out = drstage(
        &["ingest", "--manifest", "toy.csv", "--out", "filtered"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = std::fs::read_to_string(dir.path().join("filtered/exclusions.csv")).unwrap();
    assert!(summary.contains("toy,age_under_18,2"));
    assert!(summary.contains("toy,retained,2"));
    assert!(dir.path().join("filtered/filtered_toy.csv").exists());

    // All-valid manifest: summary all zeros.
    let clean = dir.path().join("clean.csv");
    std::fs::write(&clean, format!("{HEADER}x,clean,x.png,,1,,1,,\n")).unwrap();
    let out = drstage(
        &["ingest", "--manifest", "clean.csv", "--out", "f2"],
        dir.path(),
    );
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("f2/exclusions.csv")).unwrap();
    assert!(summary.contains("clean,nongradable,0"));
    assert!(summary.contains("clean,age_under_18,0"));
}

#[test]
fn ingest_fails_on_missing_file_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = drstage(
        &["ingest", "--manifest", "nowhere.csv", "--out", "f"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere.csv"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "sample_id,dataset_id,image_path,patient_id,dme,gradable,age_years,diabetic\na,toy,a.png,,,1,,\n",
    )
    .unwrap();
    let out = drstage(&["ingest", "--manifest", "bad.csv", "--out", "f"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("icdr"));

    let out_of_range = dir.path().join("range.csv");
    std::fs::write(&out_of_range, format!("{HEADER}a,toy,a.png,,5,,1,,\n")).unwrap();
    let out = drstage(
        &["ingest", "--manifest", "range.csv", "--out", "f"],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("`a`") && err.contains("line 2"), "{err}");
}

#[test]
fn train_single_source_writes_run_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_blob_dataset(&dir.path().join("data"), "solo", 24, 16, 3).unwrap();
    let cfg = micro_run_config(&[manifest], "single-source", None);
    std::fs::write(
        dir.path().join("run.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();

    let out = drstage(&["--config", "run.json", "train"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let run_dir = dir.path().join("runs/t");
    for artifact in [
        "config.json",
        "plan.json",
        "history.csv",
        "best.ckpt",
        "report.json",
        "confusion.csv",
        "flags.csv",
        "predictions.csv",
        "metadata.json",
    ] {
        assert!(run_dir.join(artifact).exists(), "{artifact} missing");
    }
    let history_first = std::fs::read(run_dir.join("history.csv")).unwrap();
    let report_first = std::fs::read(run_dir.join("report.json")).unwrap();

    // Rerun with the same config and seed: numeric artifacts byte-identical.
    let out = drstage(&["--config", "run.json", "train"], dir.path());
    assert!(out.status.success());
    assert_eq!(history_first, std::fs::read(run_dir.join("history.csv")).unwrap());
    assert_eq!(report_first, std::fs::read(run_dir.join("report.json")).unwrap());
}

#[test]
fn train_multi_source_excludes_target_from_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifests: Vec<PathBuf> = ["doma", "domb", "domc"]
        .iter()
        .map(|id| write_blob_dataset(&dir.path().join(id), id, 12, 16, 7).unwrap())
        .collect();
    let cfg = micro_run_config(&manifests, "multi-source", Some("domc"));
    std::fs::write(dir.path().join("mst.json"), cfg.to_string()).unwrap();

    let out = drstage(&["--config", "mst.json", "train"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let predictions =
        std::fs::read_to_string(dir.path().join("runs/t/predictions.csv")).unwrap();
    for line in predictions.lines().skip(1) {
        assert_eq!(line.split(',').nth(1), Some("domc"), "line: {line}");
    }
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/t/plan.json")).unwrap())
            .unwrap();
    for s in plan["source_train"].as_array().unwrap() {
        assert_ne!(s["dataset_id"], "domc");
    }
}

#[test]
fn evaluate_writes_report_and_honors_bootstrap_flag() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_blob_dataset(&dir.path().join("data"), "evalset", 15, 16, 9).unwrap();
    let cfg = micro_backbone();
    let model = Model::build(cfg, HeadConfig { in_dim: 8, hidden_dim: 16 }, 3).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();

    let out = drstage(
        &[
            "--out", "rep",
            "evaluate",
            "--checkpoint", "model.ckpt",
            "--manifest", manifest.to_str().unwrap(),
            "--bootstrap", "30",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rep/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["intervals"].is_object());
    assert!(dir.path().join("rep/resamples.csv").exists());
    assert!(dir.path().join("rep/confusion.csv").exists());
    assert!(dir.path().join("rep/flags.csv").exists());

    // Bootstrap disabled: no interval columns, no resamples file.
    let out = drstage(
        &[
            "--out", "rep0",
            "evaluate",
            "--checkpoint", "model.ckpt",
            "--manifest", manifest.to_str().unwrap(),
            "--bootstrap", "0",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rep0/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report.get("intervals").is_none());
    assert!(!dir.path().join("rep0/resamples.csv").exists());
}

#[test]
fn evaluate_reports_undefined_auc_on_single_class_manifests() {
    let dir = tempfile::tempdir().unwrap();
    // Grade-0 blobs only: the rDR reference has a single class.
    let mut rng = drstage_core::rng::substream(2, "single-class");
    let mut rows = String::from(HEADER);
    for i in 0..6 {
        let img = blob_image(16, 0, &mut rng);
        let path = dir.path().join(format!("i{i}.png"));
        write_png(&path, &img).unwrap();
        rows.push_str(&format!("s{i},mono,{},,0,,1,,\n", path.display()));
    }
    let manifest = dir.path().join("mono.csv");
    std::fs::write(&manifest, rows).unwrap();

    let cfg = micro_backbone();
    let model = Model::build(cfg, HeadConfig { in_dim: 8, hidden_dim: 16 }, 1).unwrap();
    save_checkpoint(&model, &dir.path().join("m.ckpt")).unwrap();

    let out = drstage(
        &[
            "--out", "rep",
            "evaluate",
            "--checkpoint", "m.ckpt",
            "--manifest", "mono.csv",
            "--bootstrap", "20",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rep/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["rdr_auc"].is_null());
    assert!(report["mse"].is_number());
    assert!(stdout(&out).contains("undefined"));
}

#[test]
fn explain_writes_heatmap_files_at_full_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = drstage_core::rng::substream(8, "explain-img");
    let img = blob_image(64, 3, &mut rng);
    write_png(&dir.path().join("fundus.png"), &img).unwrap();

    let cfg = micro_backbone();
    let model = Model::build(cfg, HeadConfig { in_dim: 8, hidden_dim: 16 }, 2).unwrap();
    save_checkpoint(&model, &dir.path().join("m.ckpt")).unwrap();

    let out = drstage(
        &[
            "--out", "heat",
            "explain",
            "--checkpoint", "m.ckpt",
            "--image", "fundus.png",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for file in [
        "gradrollout.png",
        "gradrollout_overlay.png",
        "gradrollout_grid.csv",
        "rollout.png",
        "rollout_overlay.png",
        "rollout_grid.csv",
    ] {
        assert!(dir.path().join("heat").join(file).exists(), "{file} missing");
    }
    let png = image::open(dir.path().join("heat/gradrollout.png")).unwrap();
    assert_eq!((png.width(), png.height()), (518, 518));
    let overlay = image::open(dir.path().join("heat/rollout_overlay.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (518, 518));

    // Restricting the method writes only that method's files.
    let out = drstage(
        &[
            "--out", "rolled",
            "explain",
            "--checkpoint", "m.ckpt",
            "--image", "fundus.png",
            "--method", "rollout",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(dir.path().join("rolled/rollout.png").exists());
    assert!(!dir.path().join("rolled/gradrollout.png").exists());
}

#[test]
fn explain_rejects_trace_incapable_backbones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig {
        kind: BackboneKind::Pooled,
        depth: 0,
        num_heads: 0,
        ..micro_backbone()
    };
    let model = Model::build(cfg, HeadConfig { in_dim: 8, hidden_dim: 16 }, 0).unwrap();
    save_checkpoint(&model, &dir.path().join("pooled.ckpt")).unwrap();
    let mut rng = drstage_core::rng::substream(1, "img");
    write_png(&dir.path().join("img.png"), &blob_image(32, 1, &mut rng)).unwrap();

    let out = drstage(
        &[
            "explain",
            "--checkpoint", "pooled.ckpt",
            "--image", "img.png",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("attention tracing"));
}

#[test]
fn report_renders_a_stored_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_blob_dataset(&dir.path().join("d"), "rep", 12, 16, 4).unwrap();
    let cfg = micro_run_config(&[manifest], "single-source", None);
    std::fs::write(dir.path().join("run.json"), cfg.to_string()).unwrap();
    let out = drstage(&["--config", "run.json", "train"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let out = drstage(&["report", "--run", "runs/t"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("lw_kappa"));
    assert!(text.contains("confusion"));

    let out = drstage(&["report", "--report", "runs/t/report.json"], dir.path());
    assert!(out.status.success());
}

#[test]
fn report_compares_two_runs_with_mann_whitney() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_blob_dataset(&dir.path().join("d"), "cmp", 14, 16, 8).unwrap();
    for (run_id, seed) in [("a", 5u64), ("b", 71u64)] {
        let mut cfg = micro_run_config(std::slice::from_ref(&manifest), "single-source", None);
        cfg["run_id"] = serde_json::json!(run_id);
        cfg["seed"] = serde_json::json!(seed);
        let cfg_path = format!("run-{run_id}.json");
        std::fs::write(dir.path().join(&cfg_path), cfg.to_string()).unwrap();
        let out = drstage(&["--config", &cfg_path, "train"], dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let out = drstage(
        &[
            "report",
            "--run", "runs/a",
            "--compare", "runs/b",
            "--metric", "mse",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("U = ") && text.contains("p = "), "{text}");
}
