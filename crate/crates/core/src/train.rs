//! Fine-tuning harness: AdamW over the whole network, MSE against the ICDR
//! grade, plateau learning-rate decay, early stopping, best-checkpoint
//! selection, and end-to-end experiment runs persisted under a run directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    apply_exclusions, assemble_plan, derive_rdr, DatasetManifest, PlanMode, SampleRef,
    TrainingPlan,
};
use crate::metrics::{
    self, BootstrapConfig, EvalOptions, EvaluationReport, Prediction, PredictionSet, ScoreMode,
};
use crate::model::{save_checkpoint, BackboneConfig, HeadConfig, Model};
use crate::preprocess::{
    augment, chain_version_hash, load_image, preprocess_chain, to_model_input, AugmentConfig,
    ImageTensor, ModelInput, PreprocCache, PreprocessConfig,
};
use crate::rng;

/// Optimization protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub early_stop_patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Relative decrease of the best validation loss that counts as an
    /// improvement for the scheduler and early stopping.
    #[serde(default = "default_improvement_threshold")]
    pub improvement_rel_threshold: f64,
}

fn default_improvement_threshold() -> f64 {
    1e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            initial_lr: 1e-6,
            weight_decay: 0.04,
            lr_decay_factor: 0.1,
            lr_patience_epochs: 4,
            early_stop_patience_epochs: 10,
            // No protocol-faithful default exists; pick a desk-scale bound.
            max_epochs: 100,
            seed: 0,
            improvement_rel_threshold: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be positive".into()));
        }
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return Err(Error::InvalidConfig("initial_lr must be positive".into()));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 || self.lr_decay_factor >= 1.0 {
            return Err(Error::InvalidConfig("lr_decay_factor must lie in (0, 1)".into()));
        }
        if self.lr_patience_epochs == 0 || self.early_stop_patience_epochs == 0 {
            return Err(Error::InvalidConfig("patiences must be at least 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One labeled, preprocessed training sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample_id: String,
    pub image: ImageTensor,
    pub target: f64,
}

/// Per-epoch record of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// The full loss/lr trajectory plus the index of the best epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Epochs at which the learning rate decayed (derived from the lr column).
    pub fn lr_decay_epochs(&self) -> Vec<usize> {
        let mut events = Vec::new();
        for w in self.epochs.windows(2) {
            if w[1].lr < w[0].lr {
                events.push(w[1].epoch);
            }
        }
        events
    }
}

/// AdamW with decoupled weight decay and the canonical moment defaults.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * params[i]);
        }
    }
}

/// Tracks non-improving validation epochs; fires after `patience` of them and
/// then rearms.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    patience: usize,
    rel_threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauTracker {
    pub fn new(patience: usize, rel_threshold: f64) -> Self {
        Self {
            patience,
            rel_threshold,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns true when the patience is exhausted at this observation.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best * (1.0 - self.rel_threshold) {
            self.best = val_loss;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.stale = 0;
                true
            } else {
                false
            }
        }
    }
}

/// Mean of squared differences between scores and targets.
pub fn mean_squared_error(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "score/target lengths {} vs {}",
            scores.len(),
            targets.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(targets)
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        / scores.len() as f64)
}

fn model_inputs(model: &Model, samples: &[TrainSample]) -> Result<Vec<ModelInput>> {
    samples
        .iter()
        .map(|s| to_model_input(&s.image, model.normalization()))
        .collect()
}

/// MSE of the model's scores against the samples' targets.
pub fn evaluate_loss(model: &Model, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("loss of no samples".into()));
    }
    let inputs = model_inputs(model, samples)?;
    let scores: Vec<f64> = model
        .forward_batch(&inputs)?
        .into_iter()
        .map(|s| s.value())
        .collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    mean_squared_error(&scores, &targets)
}

fn eval_loss_inputs(model: &Model, inputs: &[ModelInput], targets: &[f64]) -> Result<f64> {
    let scores: Vec<f64> = model
        .forward_batch(inputs)?
        .into_iter()
        .map(|s| s.value())
        .collect();
    mean_squared_error(&scores, targets)
}

/// Fine-tune the whole network on the train split, monitoring the validation
/// split. Returns the snapshot with the lowest validation loss and the full
/// history. The optimizer touches every parameter; no layer is frozen.
pub fn fine_tune(
    model: &mut Model,
    train: &[TrainSample],
    val: &[TrainSample],
    augment_cfg: Option<&AugmentConfig>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training plan has no train samples".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("training plan has no validation samples".into()));
    }
    if let Some(a) = augment_cfg {
        a.validate()?;
    }

    let val_inputs = model_inputs(model, val)?;
    let val_targets: Vec<f64> = val.iter().map(|s| s.target).collect();
    // Without augmentation the train inputs are fixed across epochs.
    let fixed_train_inputs = match augment_cfg {
        None => Some(model_inputs(model, train)?),
        Some(_) => None,
    };

    let mut optimizer = AdamW::new(model.parameter_count());
    let mut grads = vec![0.0; model.parameter_count()];
    let mut sample_grads = vec![0.0; model.parameter_count()];
    let mut lr = cfg.initial_lr;
    let mut scheduler = PlateauTracker::new(cfg.lr_patience_epochs, cfg.improvement_rel_threshold);
    let mut stopper =
        PlateauTracker::new(cfg.early_stop_patience_epochs, cfg.improvement_rel_threshold);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::substream_indexed(cfg.seed, "shuffle", epoch as u64));

        let mut sq_error_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &idx in batch {
                let sample = &train[idx];
                let input = match &fixed_train_inputs {
                    Some(inputs) => inputs[idx].clone(),
                    None => {
                        let a = augment_cfg.unwrap();
                        let draw = (epoch as u64) * train.len() as u64 + idx as u64;
                        to_model_input(&augment(&sample.image, a, draw)?, model.normalization())?
                    }
                };
                // Unit-gradient backward once; the loss gradient is a scalar
                // multiple of it.
                sample_grads.iter_mut().for_each(|g| *g = 0.0);
                let score = model.forward_backward(&input, 1.0, &mut sample_grads)?;
                let d_score = 2.0 * (score - sample.target) / batch.len() as f64;
                for (g, sg) in grads.iter_mut().zip(&sample_grads) {
                    *g += d_score * sg;
                }
                sq_error_sum += (score - sample.target) * (score - sample.target);
            }
            optimizer.step(model.params_mut().data_mut(), &grads, lr, cfg.weight_decay);
        }
        let train_loss = sq_error_sum / train.len() as f64;
        let val_loss = eval_loss_inputs(model, &val_inputs, &val_targets)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_model = model.clone();
        }
        if scheduler.observe(val_loss) {
            lr *= cfg.lr_decay_factor;
        }
        if stopper.observe(val_loss) {
            break;
        }
    }

    Ok((
        best_model,
        TrainHistory {
            epochs: history,
            best_epoch,
        },
    ))
}

/// Evaluation settings of an experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub score_mode: ScoreMode,
    #[serde(default = "default_extreme_threshold")]
    pub extreme_error_threshold: u8,
}

fn default_extreme_threshold() -> u8 {
    3
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bootstrap_resamples: 1000,
            score_mode: ScoreMode::Continuous,
            extreme_error_threshold: 3,
        }
    }
}

/// Everything needed to reproduce one experiment. The master `seed` fans out
/// to the `split`, `init`, `train`, `augment`, and `bootstrap` substreams;
/// the seeds inside `train`/`augment` are overwritten by the derived values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: PlanMode,
    #[serde(default)]
    pub target_domain: Option<String>,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
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
}

fn default_black_threshold() -> f64 {
    crate::preprocess::DEFAULT_BLACK_THRESHOLD
}

/// Result of an experiment run, with every artifact persisted under
/// `run_dir`.
#[derive(Debug)]
pub struct ExperimentRecord {
    pub run_dir: PathBuf,
    pub plan: TrainingPlan,
    pub history: TrainHistory,
    pub report: EvaluationReport,
    pub predictions: Vec<Prediction>,
}

fn load_samples(
    refs: &[SampleRef],
    manifests: &BTreeMap<String, &DatasetManifest>,
    preprocess_cfg: &PreprocessConfig,
    cache: Option<&PreprocCache>,
) -> Result<Vec<TrainSample>> {
    let version = chain_version_hash(preprocess_cfg);
    refs.iter()
        .map(|r| {
            let manifest = manifests.get(&r.dataset_id).ok_or_else(|| {
                Error::UnknownDomain(r.dataset_id.clone())
            })?;
            let record = manifest.record(&r.sample_id).ok_or_else(|| {
                Error::InvalidArgument(format!("sample {} missing from manifest", r.sample_id))
            })?;
            let icdr = record.icdr.ok_or_else(|| {
                Error::MissingLabel(format!("icdr absent for `{}`", record.sample_id))
            })?;
            let path = PathBuf::from(&record.image_path);
            let compute = || preprocess_chain(&load_image(&path)?, preprocess_cfg);
            let key = format!("{}:{}", r.dataset_id, r.sample_id);
            let image = match cache {
                Some(c) => c.get_or_compute(&key, version, compute)?,
                None => compute()?,
            };
            Ok(TrainSample {
                sample_id: record.sample_id.clone(),
                image,
                target: icdr as f64,
            })
        })
        .collect()
}

/// Assemble the plan, fine-tune, evaluate on the designated evaluation set,
/// and persist config, history, best checkpoint, report, and audit CSVs
/// under `run_dir`.
pub fn run_experiment(
    manifests: &[DatasetManifest],
    cfg: &ExperimentConfig,
    run_dir: &Path,
) -> Result<ExperimentRecord> {
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::create_dir_all(run_dir)?;

    let filtered: Vec<DatasetManifest> = manifests.iter().map(apply_exclusions).collect();
    let plan = assemble_plan(
        cfg.mode,
        &filtered,
        cfg.target_domain.as_deref(),
        rng::derive_seed(cfg.seed, "split"),
    )?;

    let by_id: BTreeMap<String, &DatasetManifest> = filtered
        .iter()
        .map(|m| (m.dataset_id.clone(), m))
        .collect();
    let preprocess_cfg = PreprocessConfig {
        black_threshold: cfg.black_threshold,
        target_side: cfg.backbone.image_side,
    };
    let cache = match &cfg.cache_dir {
        Some(dir) => Some(PreprocCache::new(dir)?),
        None => None,
    };
    let train_samples = load_samples(&plan.source_train, &by_id, &preprocess_cfg, cache.as_ref())?;
    let val_samples = load_samples(&plan.joint_val, &by_id, &preprocess_cfg, cache.as_ref())?;
    let eval_samples = load_samples(&plan.target_eval, &by_id, &preprocess_cfg, cache.as_ref())?;
    if eval_samples.is_empty() {
        return Err(Error::EmptyInput("plan has no evaluation samples".into()));
    }

    let mut model = Model::build(
        cfg.backbone.clone(),
        cfg.head.clone(),
        rng::derive_seed(cfg.seed, "init"),
    )?;
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(cfg.seed, "train"),
        ..cfg.train.clone()
    };
    let augment_cfg = cfg.augment.clone().map(|a| AugmentConfig {
        seed: rng::derive_seed(cfg.seed, "augment"),
        ..a
    });
    let (best_model, history) = fine_tune(
        &mut model,
        &train_samples,
        &val_samples,
        augment_cfg.as_ref(),
        &train_cfg,
    )?;

    // Score the evaluation set with the best checkpoint.
    let eval_inputs = model_inputs(&best_model, &eval_samples)?;
    let scores = best_model.forward_batch(&eval_inputs)?;
    let mut preds = Vec::with_capacity(eval_samples.len());
    for (sample_ref, (sample, score)) in plan
        .target_eval
        .iter()
        .zip(eval_samples.iter().zip(scores.iter()))
    {
        let record = by_id[&sample_ref.dataset_id]
            .record(&sample_ref.sample_id)
            .expect("sample resolved earlier");
        preds.push(Prediction::new(
            sample.sample_id.clone(),
            sample_ref.dataset_id.clone(),
            record.image_path.clone(),
            score.value(),
            record.icdr.expect("label checked earlier"),
            derive_rdr(record)?,
        )?);
    }
    let prediction_set = PredictionSet::new(preds.clone());
    let eval_opts = EvalOptions {
        score_mode: cfg.eval.score_mode,
        bootstrap: (cfg.eval.bootstrap_resamples > 0).then(|| BootstrapConfig {
            n_resamples: cfg.eval.bootstrap_resamples,
            seed: rng::derive_seed(cfg.seed, "bootstrap"),
            ..BootstrapConfig::default()
        }),
        extreme_error_threshold: cfg.eval.extreme_error_threshold,
    };
    let report = metrics::evaluate(&prediction_set, &eval_opts)?;

    write_run_artifacts(run_dir, cfg, &plan, &history, &best_model, &report, &preds)?;
    let finished_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // Timestamps are confined to the metadata file so every other artifact is
    // byte-reproducible.
    std::fs::write(
        run_dir.join("metadata.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "started_unix": started_unix,
            "finished_unix": finished_unix,
        }))?,
    )?;

    Ok(ExperimentRecord {
        run_dir: run_dir.to_path_buf(),
        plan,
        history,
        report,
        predictions: preds,
    })
}

/// Serialize `history.csv` with the exact column set of the run layout.
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "epoch,train_loss,val_loss,lr")?;
    for e in &history.epochs {
        writeln!(file, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr)?;
    }
    Ok(())
}

fn write_run_artifacts(
    run_dir: &Path,
    cfg: &ExperimentConfig,
    plan: &TrainingPlan,
    history: &TrainHistory,
    best_model: &Model,
    report: &EvaluationReport,
    preds: &[Prediction],
) -> Result<()> {
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    std::fs::write(run_dir.join("plan.json"), serde_json::to_string_pretty(plan)?)?;
    write_history_csv(&run_dir.join("history.csv"), history)?;
    save_checkpoint(best_model, &run_dir.join("best.ckpt"))?;
    std::fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    metrics::write_confusion_csv(&run_dir.join("confusion.csv"), &report.confusion)?;
    metrics::write_flags_csv(&run_dir.join("flags.csv"), &report.flags)?;
    if !report.resamples.is_empty() {
        metrics::write_resamples_csv(&run_dir.join("resamples.csv"), &report.resamples)?;
    }
    let mut pred_csv = String::from("sample_id,dataset_id,score,grade_pred,icdr_ref,rdr_ref\n");
    for p in preds {
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
    std::fs::write(run_dir.join("predictions.csv"), pred_csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, HeadConfig, Model};
    use crate::synth::blob_dataset;

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

    fn micro_head() -> HeadConfig {
        HeadConfig {
            in_dim: 8,
            hidden_dim: 16,
        }
    }

    fn samples_with_labels(labels: &[f64], side: usize, seed: u64) -> Vec<TrainSample> {
        let images = blob_dataset(labels.len(), side, seed);
        labels
            .iter()
            .zip(images)
            .enumerate()
            .map(|(i, (&target, (image, _)))| TrainSample {
                sample_id: format!("s{i:03}"),
                image,
                target,
            })
            .collect()
    }

    #[test]
    fn mse_hand_values() {
        assert_eq!(mean_squared_error(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mean_squared_error(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mean_squared_error(&[3.5], &[4.0]).unwrap(), 0.25);
        assert!(mean_squared_error(&[], &[]).is_err());
    }

    #[test]
    fn plateau_tracker_fires_once_patience_exhausts() {
        let mut tracker = PlateauTracker::new(4, 1e-4);
        let seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94];
        let fired: Vec<usize> = seq
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| tracker.observe(v).then_some(i + 1))
            .collect();
        assert_eq!(fired, vec![6]);
    }

    #[test]
    fn fine_tune_validates_inputs() {
        let cfg = micro_backbone();
        let mut model = Model::build(cfg.clone(), micro_head(), 0).unwrap();
        let samples = samples_with_labels(&[1.0, 2.0], cfg.image_side, 0);
        let train_cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            fine_tune(&mut model, &[], &samples, None, &train_cfg),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            fine_tune(&mut model, &samples, &[], None, &train_cfg),
            Err(Error::EmptyInput(_))
        ));
        let bad_cfg = TrainConfig {
            lr_decay_factor: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            fine_tune(&mut model, &samples, &samples, None, &bad_cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn constant_labels_regress_to_the_constant() {
        let cfg = micro_backbone();
        let mut model = Model::build(cfg.clone(), micro_head(), 3).unwrap();
        let samples = samples_with_labels(&[2.0; 32], cfg.image_side, 7);
        let train_cfg = TrainConfig {
            initial_lr: 1e-2,
            max_epochs: 120,
            early_stop_patience_epochs: 40,
            lr_patience_epochs: 20,
            seed: 5,
            ..Default::default()
        };
        let (best, history) = fine_tune(&mut model, &samples, &samples, None, &train_cfg).unwrap();

        let best_val = history.epochs[history.best_epoch - 1].val_loss;
        assert!(best_val < 0.01, "best val loss {best_val}");
        // MSE minimizer of constant labels is the constant itself.
        let inputs = model_inputs(&best, &samples).unwrap();
        for score in best.forward_batch(&inputs).unwrap() {
            assert!((score.value() - 2.0).abs() < 0.1, "score {}", score.value());
        }

        // Training loss converges monotonically after burn-in: the 5-epoch
        // moving average decreases until it reaches the convergence floor.
        let losses: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
        let ma: Vec<f64> = losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        let floor = 0.01;
        let mut converged = false;
        for w in ma.windows(2).skip(1) {
            if w[0] < floor {
                converged = true;
                break;
            }
            assert!(
                w[1] <= w[0] * 1.001,
                "moving average rose before convergence: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(converged || ma.last().is_some_and(|&v| v < floor));
    }

    #[test]
    fn best_checkpoint_has_minimum_val_loss_and_lr_decays_exactly() {
        let cfg = micro_backbone();
        let mut model = Model::build(cfg.clone(), micro_head(), 1).unwrap();
        let labels: Vec<f64> = (0..24).map(|i| (i % 5) as f64).collect();
        let samples = samples_with_labels(&labels, cfg.image_side, 9);
        let train_cfg = TrainConfig {
            initial_lr: 5e-3,
            max_epochs: 30,
            lr_patience_epochs: 3,
            early_stop_patience_epochs: 30,
            seed: 2,
            ..Default::default()
        };
        let (best, history) = fine_tune(&mut model, &samples, &samples, None, &train_cfg).unwrap();

        let min_val = history
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(history.epochs[history.best_epoch - 1].val_loss, min_val);
        let best_loss = evaluate_loss(&best, &samples).unwrap();
        assert!((best_loss - min_val).abs() < 1e-12);

        // lr is non-increasing and every decrease is exactly one decay factor.
        for w in history.epochs.windows(2) {
            assert!(w[1].lr <= w[0].lr);
            if w[1].lr < w[0].lr {
                assert!((w[1].lr - w[0].lr * train_cfg.lr_decay_factor).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn every_tensor_moves_after_one_epoch() {
        let cfg = micro_backbone();
        let mut model = Model::build(cfg.clone(), micro_head(), 4).unwrap();
        let initial = model.params().data().to_vec();
        let labels: Vec<f64> = (0..16).map(|i| (i % 5) as f64).collect();
        let samples = samples_with_labels(&labels, cfg.image_side, 11);
        let train_cfg = TrainConfig {
            initial_lr: 1e-2,
            max_epochs: 1,
            ..Default::default()
        };
        fine_tune(&mut model, &samples, &samples, None, &train_cfg).unwrap();
        for def in model.params().defs() {
            let moved = (def.offset..def.offset + def.len)
                .any(|i| model.params().data()[i] != initial[i]);
            assert!(moved, "tensor {} kept its initial values", def.name);
        }
    }

    #[test]
    fn fine_tune_is_deterministic() {
        let cfg = micro_backbone();
        let labels: Vec<f64> = (0..12).map(|i| (i % 3) as f64).collect();
        let samples = samples_with_labels(&labels, cfg.image_side, 13);
        let train_cfg = TrainConfig {
            initial_lr: 1e-3,
            max_epochs: 5,
            seed: 77,
            ..Default::default()
        };
        let run = || {
            let mut model = Model::build(cfg.clone(), micro_head(), 42).unwrap();
            let (_, history) =
                fine_tune(&mut model, &samples, &samples, None, &train_cfg).unwrap();
            history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn augmented_fine_tune_runs_and_is_deterministic() {
        let cfg = micro_backbone();
        let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let samples = samples_with_labels(&labels, cfg.image_side, 17);
        let aug = AugmentConfig {
            seed: 3,
            ..AugmentConfig::default()
        };
        let train_cfg = TrainConfig {
            initial_lr: 1e-3,
            max_epochs: 3,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut model = Model::build(cfg.clone(), micro_head(), 6).unwrap();
            let (_, h) = fine_tune(&mut model, &samples, &samples, Some(&aug), &train_cfg).unwrap();
            h
        };
        assert_eq!(run(), run());
    }
}
