//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use drstage_core::explain::{
    grad_rollout, overlay, plain_rollout, write_heatmap_png, write_patch_grid_csv, Heatmap,
    HEATMAP_SIDE,
};
use drstage_core::ingest::{
    apply_exclusions_with_summary, derive_rdr, load_manifest, write_manifest, DatasetManifest,
    PlanMode,
};
use drstage_core::metrics::{
    self, BootstrapConfig, EvalOptions, EvaluationReport, Prediction, PredictionSet, ScoreMode,
};
use drstage_core::model::{load_checkpoint, BackboneConfig, HeadConfig, Model};
use drstage_core::preprocess::{
    chain_version_hash, load_image, preprocess_chain, to_model_input, AugmentConfig, PreprocCache,
    PreprocessConfig,
};
use drstage_core::rng;
use drstage_core::train::{run_experiment, EvalSettings, ExperimentConfig, TrainConfig};

/// Environment variable naming the preprocessing cache root.
pub const CACHE_ENV: &str = "DRSTAGE_CACHE";

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// The run configuration document consumed by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifests: Vec<PathBuf>,
    pub mode: PlanMode,
    #[serde(default)]
    pub target_domain: Option<String>,
    pub backbone: BackboneConfig,
    /// Defaults to a 512-hidden head matched to the backbone width.
    #[serde(default)]
    pub head: Option<HeadConfig>,
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "default_black_threshold")]
    pub black_threshold: f64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub run_id: Option<String>,
}

fn default_black_threshold() -> f64 {
    drstage_core::preprocess::DEFAULT_BLACK_THRESHOLD
}

fn cache_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

pub fn ingest(globals: &Globals, manifest_paths: &[PathBuf]) -> Result<()> {
    let out_dir = globals.out.clone().unwrap_or_else(|| PathBuf::from("ingest-out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let mut summary_csv = String::from("dataset_id,rule,count\n");
    println!("{:<12} {:>12} {:>12} {:>12} {:>12} {:>9} {:>7}",
        "dataset", "nongradable", "missing_icdr", "age<18", "nondiabetic", "retained", "total");
    for path in manifest_paths {
        let manifest = load_manifest(path)
            .with_context(|| format!("loading manifest {}", path.display()))?;
        let (filtered, s) = apply_exclusions_with_summary(&manifest);
        println!(
            "{:<12} {:>12} {:>12} {:>12} {:>12} {:>9} {:>7}",
            filtered.dataset_id,
            s.nongradable,
            s.missing_icdr,
            s.age_under_18,
            s.nondiabetic,
            s.retained,
            s.total
        );
        for (rule, count) in [
            ("nongradable", s.nongradable),
            ("missing_icdr", s.missing_icdr),
            ("age_under_18", s.age_under_18),
            ("nondiabetic", s.nondiabetic),
            ("retained", s.retained),
            ("total", s.total),
        ] {
            summary_csv.push_str(&format!("{},{rule},{count}\n", filtered.dataset_id));
        }
        let out_path = out_dir.join(format!("filtered_{}.csv", filtered.dataset_id));
        write_manifest(&filtered, &out_path)
            .with_context(|| format!("writing {}", out_path.display()))?;
    }
    std::fs::write(out_dir.join("exclusions.csv"), summary_csv)?;
    println!("wrote filtered manifests and exclusions.csv to {}", out_dir.display());
    Ok(())
}

pub fn train(globals: &Globals) -> Result<()> {
    let config_path = globals
        .config
        .as_ref()
        .context("train requires --config <run-config.json>")?;
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let mut run_cfg: RunConfig =
        serde_json::from_str(&text).context("parsing run configuration")?;
    if let Some(seed) = globals.seed {
        run_cfg.seed = seed;
    }
    if let Some(out) = &globals.out {
        run_cfg.out_dir = Some(out.clone());
    }
    if run_cfg.cache_dir.is_none() {
        run_cfg.cache_dir = cache_from_env();
    }

    let manifests: Vec<DatasetManifest> = run_cfg
        .manifests
        .iter()
        .map(|p| load_manifest(p).with_context(|| format!("loading manifest {}", p.display())))
        .collect::<Result<_>>()?;

    let head = run_cfg
        .head
        .clone()
        .unwrap_or_else(|| HeadConfig::for_backbone(&run_cfg.backbone));
    let experiment = ExperimentConfig {
        mode: run_cfg.mode,
        target_domain: run_cfg.target_domain.clone(),
        backbone: run_cfg.backbone.clone(),
        head,
        train: run_cfg.train.clone(),
        augment: run_cfg.augment.clone(),
        eval: run_cfg.eval.clone(),
        black_threshold: run_cfg.black_threshold,
        cache_dir: run_cfg.cache_dir.clone(),
        seed: run_cfg.seed,
    };
    let out_dir = run_cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let run_id = run_cfg
        .run_id
        .clone()
        .unwrap_or_else(|| format!("run-{:016x}", run_cfg.seed));
    let run_dir = out_dir.join(run_id);

    let record = run_experiment(&manifests, &experiment, &run_dir)
        .context("running experiment")?;
    println!(
        "run complete: {} samples evaluated, best epoch {}, artifacts in {}",
        record.report.sample_count,
        record.history.best_epoch,
        record.run_dir.display()
    );
    print_report(&record.report);
    Ok(())
}

fn predictions_for_manifest(
    model: &Model,
    manifest: &DatasetManifest,
    cache: Option<&PreprocCache>,
) -> Result<Vec<Prediction>> {
    let preprocess_cfg = PreprocessConfig {
        target_side: model.describe_backbone().image_side,
        ..PreprocessConfig::default()
    };
    let version = chain_version_hash(&preprocess_cfg);
    let mut preds = Vec::new();
    for record in &manifest.records {
        let icdr = record
            .icdr
            .context("excluded manifests should always carry labels")?;
        let path = PathBuf::from(&record.image_path);
        let compute = || preprocess_chain(&load_image(&path)?, &preprocess_cfg);
        let key = format!("{}:{}", record.dataset_id, record.sample_id);
        let image = match cache {
            Some(c) => c.get_or_compute(&key, version, compute)?,
            None => compute()?,
        };
        let input = to_model_input(&image, model.normalization())?;
        let score = model.forward_batch(std::slice::from_ref(&input))?[0];
        preds.push(Prediction::new(
            record.sample_id.clone(),
            record.dataset_id.clone(),
            record.image_path.clone(),
            score.value(),
            icdr,
            derive_rdr(record)?,
        )?);
    }
    Ok(preds)
}

pub fn evaluate(
    globals: &Globals,
    checkpoint: &Path,
    manifest_path: &Path,
    bootstrap: usize,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let manifest = load_manifest(manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let (eligible, _) = apply_exclusions_with_summary(&manifest);
    if eligible.records.is_empty() {
        bail!("no eligible records in {}", manifest_path.display());
    }
    let cache = match cache_from_env() {
        Some(dir) => Some(PreprocCache::new(dir)?),
        None => None,
    };
    let preds = predictions_for_manifest(&model, &eligible, cache.as_ref())?;
    let seed = globals.seed.unwrap_or(0);
    let opts = EvalOptions {
        score_mode: ScoreMode::Continuous,
        bootstrap: (bootstrap > 0).then(|| BootstrapConfig {
            n_resamples: bootstrap,
            seed: rng::derive_seed(seed, "bootstrap"),
            ..BootstrapConfig::default()
        }),
        extreme_error_threshold: 3,
    };
    let prediction_set = PredictionSet::new(preds.clone());
    let report = metrics::evaluate(&prediction_set, &opts)?;

    let out_dir = globals
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("eval-report"));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    metrics::write_confusion_csv(&out_dir.join("confusion.csv"), &report.confusion)?;
    metrics::write_flags_csv(&out_dir.join("flags.csv"), &report.flags)?;
    if !report.resamples.is_empty() {
        metrics::write_resamples_csv(&out_dir.join("resamples.csv"), &report.resamples)?;
    }
    let mut pred_csv = String::from("sample_id,dataset_id,score,grade_pred,icdr_ref,rdr_ref\n");
    for p in &preds {
        pred_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.sample_id,
            p.dataset_id,
            p.score,
            p.grade_pred,
            p.icdr_ref,
            if p.rdr_ref { 1 } else { 0 }
        ));
    }
    std::fs::write(out_dir.join("predictions.csv"), pred_csv)?;

    println!("evaluated {} samples; report in {}", report.sample_count, out_dir.display());
    print_report(&report);
    Ok(())
}

fn write_method_outputs(
    out_dir: &Path,
    stem: &str,
    heatmap: &Heatmap,
    base: &drstage_core::preprocess::ImageTensor,
    alpha: f64,
) -> Result<()> {
    write_heatmap_png(&out_dir.join(format!("{stem}.png")), heatmap)?;
    let blended = overlay(heatmap, base, alpha)?;
    drstage_core::preprocess::write_png(&out_dir.join(format!("{stem}_overlay.png")), &blended)?;
    write_patch_grid_csv(&out_dir.join(format!("{stem}_grid.csv")), heatmap)?;
    Ok(())
}

pub fn explain(
    globals: &Globals,
    checkpoint: &Path,
    image_path: &Path,
    method: &str,
    drop_fraction: f64,
    alpha: f64,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if !model.supports_attention_trace() {
        bail!("backbone does not support attention tracing");
    }
    let raw = load_image(image_path)
        .with_context(|| format!("loading image {}", image_path.display()))?;

    // One chain at the model's input side, one at the heatmap side for the
    // overlay base.
    let model_side = model.describe_backbone().image_side;
    let model_chain = PreprocessConfig {
        target_side: model_side,
        ..PreprocessConfig::default()
    };
    let resized = preprocess_chain(&raw, &model_chain)?;
    let input = to_model_input(&resized, model.normalization())?;
    let display = if model_side == HEATMAP_SIDE {
        resized
    } else {
        preprocess_chain(&raw, &PreprocessConfig::default())?
    };

    let (score, trace) = model.forward_traced(&input)?;
    let out_dir = globals.out.clone().unwrap_or_else(|| PathBuf::from("explain-out"));
    std::fs::create_dir_all(&out_dir)?;

    if method == "both" || method == "gradrollout" {
        let heat = grad_rollout(&trace, drop_fraction)?;
        write_method_outputs(&out_dir, "gradrollout", &heat, &display, alpha)?;
    }
    if method == "both" || method == "rollout" {
        let heat = plain_rollout(&trace)?;
        write_method_outputs(&out_dir, "rollout", &heat, &display, alpha)?;
    }
    println!(
        "stage score {:.3}; heatmaps written to {}",
        score.value(),
        out_dir.display()
    );
    Ok(())
}

fn print_report(report: &EvaluationReport) {
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".to_string(),
    };
    let interval = |name: &str| match report.intervals.get(name) {
        Some((lo, hi)) => format!("  [{lo:.4}, {hi:.4}]"),
        None => String::new(),
    };
    println!("samples   {}", report.sample_count);
    println!("mc_acc    {:.4}{}", report.mc_acc, interval("mc_acc"));
    println!("lw_kappa  {}{}", fmt_opt(report.lw_kappa), interval("lw_kappa"));
    println!("mse       {:.4}{}", report.mse, interval("mse"));
    println!("mae       {:.4}{}", report.mae, interval("mae"));
    println!("rdr_auc   {}{}", fmt_opt(report.rdr_auc), interval("rdr_auc"));
    println!("rdr_f1    {:.4}{}", report.rdr_f1, interval("rdr_f1"));
    println!("rdr_acc   {:.4}{}", report.rdr_acc, interval("rdr_acc"));
    println!("flagged   {} extreme errors", report.flags.len());
    if let Some(sig) = &report.significance {
        println!(
            "vs {}: U = {:.1}, p = {:.4}",
            sig.comparator, sig.u_statistic, sig.p_value
        );
    }
    println!("confusion (rows = reference, cols = predicted):");
    for row in &report.confusion {
        println!("  {:>6} {:>6} {:>6} {:>6} {:>6}", row[0], row[1], row[2], row[3], row[4]);
    }
}

/// Read one metric's values out of a run's `resamples.csv`.
fn read_resamples(run_dir: &Path, metric: &str) -> Result<Vec<f64>> {
    let path = run_dir.join("resamples.csv");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut values = Vec::new();
    for line in text.lines().skip(1) {
        let mut cols = line.split(',');
        if cols.next() == Some(metric) {
            let value = cols
                .nth(1)
                .with_context(|| format!("malformed resample row: {line}"))?;
            values.push(value.parse::<f64>()?);
        }
    }
    if values.is_empty() {
        bail!("no `{metric}` resamples in {}", path.display());
    }
    Ok(values)
}

pub fn report(
    run: Option<&Path>,
    report_path: Option<&Path>,
    compare: Option<&Path>,
    metric: &str,
) -> Result<()> {
    let path = match (run, report_path) {
        (Some(dir), None) => dir.join("report.json"),
        (None, Some(p)) => p.to_path_buf(),
        _ => bail!("report requires exactly one of --run or --report"),
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut report: EvaluationReport = serde_json::from_str(&text)?;

    if let Some(other) = compare {
        let run_dir = run.context("--compare requires --run")?;
        let ours = read_resamples(run_dir, metric)?;
        let theirs = read_resamples(other, metric)?;
        let significance =
            metrics::significance_from_resamples(other.display().to_string(), &ours, &theirs)
                .with_context(|| format!("comparing `{metric}` distributions"))?;
        report.significance = Some(significance);
    }
    print_report(&report);
    Ok(())
}
