//! Evaluation battery: staging metrics, referable-DR metrics, bootstrap
//! intervals, rank-based significance testing, and extreme-error flagging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of ICDR grades (0 through 4).
pub const GRADE_COUNT: usize = 5;

/// Referable DR threshold on the ICDR scale: moderate or worse.
pub const RDR_GRADE_THRESHOLD: u8 = 2;

/// Combined sample size up to which the Mann-Whitney p-value is computed by
/// exact enumeration instead of the normal approximation.
const MWU_EXACT_LIMIT: usize = 20;

/// One scored sample: continuous model output plus reference labels.
///
/// `grade_pred` is always `discretize(score)`; the constructor maintains the
/// consistency so downstream metrics never disagree on the discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub dataset_id: String,
    pub image_path: String,
    pub score: f64,
    pub grade_pred: u8,
    pub icdr_ref: u8,
    pub rdr_ref: bool,
}

impl Prediction {
    pub fn new(
        sample_id: impl Into<String>,
        dataset_id: impl Into<String>,
        image_path: impl Into<String>,
        score: f64,
        icdr_ref: u8,
        rdr_ref: bool,
    ) -> Result<Self> {
        if icdr_ref as usize >= GRADE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "icdr_ref {icdr_ref} outside 0..=4"
            )));
        }
        let grade_pred = discretize(score)?;
        Ok(Self {
            sample_id: sample_id.into(),
            dataset_id: dataset_id.into(),
            image_path: image_path.into(),
            score,
            grade_pred,
            icdr_ref,
            rdr_ref,
        })
    }
}

/// An ordered collection of predictions for one evaluation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    preds: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(preds: Vec<Prediction>) -> Self {
        Self { preds }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prediction> {
        self.preds.iter()
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> PredictionSet {
        PredictionSet::new(indices.iter().map(|&i| self.preds[i].clone()).collect())
    }
}

/// Whether MSE/MAE are computed on the continuous score or the discretized
/// grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Continuous,
    Discretized,
}

/// Round a continuous stage score to the nearest integer grade, half away
/// from zero, clamped to the ICDR range.
pub fn discretize(score: f64) -> Result<u8> {
    if !score.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot discretize non-finite score {score}"
        )));
    }
    Ok(score.round().clamp(0.0, 4.0) as u8)
}

/// 5x5 count matrix; entry `(i, j)` counts samples with reference grade `i`
/// and predicted grade `j`.
pub fn confusion_matrix(preds: &PredictionSet) -> Result<[[u64; GRADE_COUNT]; GRADE_COUNT]> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("confusion matrix of no samples".into()));
    }
    let mut m = [[0u64; GRADE_COUNT]; GRADE_COUNT];
    for p in preds.iter() {
        m[p.icdr_ref as usize][p.grade_pred as usize] += 1;
    }
    Ok(m)
}

/// Linearly weighted Cohen's kappa from a 5x5 confusion matrix.
///
/// kappa = 1 - sum(w_ij * O_ij) / sum(w_ij * E_ij) with disagreement weights
/// w_ij = |i - j| / 4, observed proportions O, and E the outer product of the
/// marginals.
pub fn lw_kappa(confusion: &[[u64; GRADE_COUNT]; GRADE_COUNT]) -> Result<f64> {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::EmptyInput("kappa of an empty matrix".into()));
    }
    let n = total as f64;
    let mut row = [0.0; GRADE_COUNT];
    let mut col = [0.0; GRADE_COUNT];
    for i in 0..GRADE_COUNT {
        for j in 0..GRADE_COUNT {
            let o = confusion[i][j] as f64 / n;
            row[i] += o;
            col[j] += o;
        }
    }
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..GRADE_COUNT {
        for j in 0..GRADE_COUNT {
            let w = (i as f64 - j as f64).abs() / (GRADE_COUNT - 1) as f64;
            observed += w * confusion[i][j] as f64 / n;
            expected += w * row[i] * col[j];
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedKappa);
    }
    Ok(1.0 - observed / expected)
}

/// Multiclass accuracy on discretized grades.
pub fn mc_acc(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("accuracy of no samples".into()));
    }
    let correct = preds
        .iter()
        .filter(|p| p.grade_pred == p.icdr_ref)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

fn errors(preds: &PredictionSet, mode: ScoreMode) -> impl Iterator<Item = f64> + '_ {
    preds.iter().map(move |p| {
        let s = match mode {
            ScoreMode::Continuous => p.score,
            ScoreMode::Discretized => p.grade_pred as f64,
        };
        s - p.icdr_ref as f64
    })
}

/// Mean squared error of the (continuous or discretized) score against the
/// integer reference grade.
pub fn mse(preds: &PredictionSet, mode: ScoreMode) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("MSE of no samples".into()));
    }
    Ok(errors(preds, mode).map(|e| e * e).sum::<f64>() / preds.len() as f64)
}

/// Mean absolute error, same conventions as [`mse`].
pub fn mae(preds: &PredictionSet, mode: ScoreMode) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("MAE of no samples".into()));
    }
    Ok(errors(preds, mode).map(f64::abs).sum::<f64>() / preds.len() as f64)
}

/// Referable-DR AUC on the continuous score via the rank statistic:
/// probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn rdr_auc(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("AUC of no samples".into()));
    }
    let n_pos = preds.iter().filter(|p| p.rdr_ref).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let ranks = midranks(&scores);
    let rank_sum_pos: f64 = preds
        .iter()
        .zip(ranks.iter())
        .filter(|(p, _)| p.rdr_ref)
        .map(|(_, r)| *r)
        .sum();
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Referable-DR metrics. AUC is `None` when the reference labels contain a
/// single class; F1 and binary accuracy are always computed from the
/// thresholded predicted grade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdrMetrics {
    pub auc: Option<f64>,
    pub f1: f64,
    pub acc: f64,
}

pub fn rdr_metrics(preds: &PredictionSet) -> Result<RdrMetrics> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("rDR metrics of no samples".into()));
    }
    let auc = match rdr_auc(preds) {
        Ok(a) => Some(a),
        Err(Error::AucUndefined) => None,
        Err(e) => return Err(e),
    };
    let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
    for p in preds.iter() {
        let pred_pos = p.grade_pred >= RDR_GRADE_THRESHOLD;
        match (pred_pos, p.rdr_ref) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let f1_den = 2 * tp + fp + fneg;
    let f1 = if f1_den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / f1_den as f64
    };
    let acc = (tp + tn) as f64 / preds.len() as f64;
    Ok(RdrMetrics { auc, f1, acc })
}

/// Average ranks (1-based) with midranks for ties.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mid;
        }
        i = j;
    }
    ranks
}

/// Two-sided Mann-Whitney U test. Returns `(U, p)`, where U is the statistic
/// of the first sample.
///
/// Ranks use midranks for ties. For combined sample sizes up to 20 the
/// p-value is computed by exact enumeration of all group assignments; above
/// that, by the normal approximation with tie-corrected variance and a
/// continuity correction.
pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64)> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::EmptyInput("Mann-Whitney on an empty sample".into()));
    }
    let first = sample_a[0];
    if sample_a.iter().chain(sample_b.iter()).all(|&v| v == first) {
        return Err(Error::DegenerateVariance);
    }
    let na = sample_a.len();
    let nb = sample_b.len();
    let n = na + nb;
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b.iter()).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mean_u = (na * nb) as f64 / 2.0;

    let p = if n <= MWU_EXACT_LIMIT {
        exact_two_sided_p(&ranks, na, u_a, mean_u)
    } else {
        normal_two_sided_p(&pooled, &ranks, na, nb, u_a, mean_u)
    };
    Ok((u_a, p.min(1.0)))
}

/// Exact permutation p-value: the fraction of the C(n, na) assignments whose
/// U statistic is at least as far from the null mean as the observed one.
fn exact_two_sided_p(ranks: &[f64], na: usize, u_obs: f64, mean_u: f64) -> f64 {
    let n = ranks.len();
    let observed_dev = (u_obs - mean_u).abs() - 1e-12;
    let offset = (na * (na + 1)) as f64 / 2.0;
    let mut extreme = 0u64;
    let mut total = 0u64;
    // Lexicographic enumeration of all na-subsets of 0..n.
    let mut idx: Vec<usize> = (0..na).collect();
    loop {
        let u: f64 = idx.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
        total += 1;
        if (u - mean_u).abs() >= observed_dev {
            extreme += 1;
        }
        // Advance to the next combination.
        let mut k = na;
        loop {
            if k == 0 {
                return extreme as f64 / total as f64;
            }
            k -= 1;
            if idx[k] != k + n - na {
                break;
            }
        }
        idx[k] += 1;
        for j in k + 1..na {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn normal_two_sided_p(
    pooled: &[f64],
    _ranks: &[f64],
    na: usize,
    nb: usize,
    u_a: f64,
    mean_u: f64,
) -> f64 {
    let n = (na + nb) as f64;
    // Tie correction: sum over tie groups of (t^3 - t).
    let mut sorted = pooled.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let diff = u_a - mean_u;
    let corrected = if diff > 0.0 {
        diff - 0.5
    } else if diff < 0.0 {
        diff + 0.5
    } else {
        0.0
    };
    let z = corrected / var.sqrt();
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Configuration for bootstrap interval estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    /// Fraction of the set drawn into each resample.
    pub fraction: f64,
    /// Lower and upper quantiles of the resample distribution.
    pub quantiles: (f64, f64),
    pub seed: u64,
    /// Subsampling without replacement by default; set for classical
    /// with-replacement resampling.
    pub with_replacement: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: 1000,
            fraction: 0.6,
            quantiles: (0.25, 0.75),
            seed: 0,
            with_replacement: false,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.n_resamples == 0 {
            return Err(Error::InvalidArgument("n_resamples must be > 0".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bootstrap fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        let (lo, hi) = self.quantiles;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "bad quantile pair ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Metric values over the bootstrap resamples. Resamples on which the metric
/// is undefined are skipped; more than 10% skipped is a reliability error.
pub fn bootstrap_distribution<F>(
    metric: F,
    preds: &PredictionSet,
    cfg: &BootstrapConfig,
) -> Result<Vec<f64>>
where
    F: Fn(&PredictionSet) -> Result<f64>,
{
    if preds.is_empty() {
        return Err(Error::EmptyInput("bootstrap of no samples".into()));
    }
    cfg.validate()?;
    let n = preds.len();
    let k = ((cfg.fraction * n as f64).floor() as usize).max(1);

    // Canonical order: draws address samples through a sorted-id index, so
    // the interval does not depend on the incoming row order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        preds.preds[a]
            .sample_id
            .cmp(&preds.preds[b].sample_id)
            .then(a.cmp(&b))
    });

    let mut values = Vec::with_capacity(cfg.n_resamples);
    let mut skipped = 0usize;
    for r in 0..cfg.n_resamples {
        let mut rng = rng::substream_indexed(cfg.seed, "bootstrap", r as u64);
        let chosen: Vec<usize> = if cfg.with_replacement {
            (0..k).map(|_| order[rng.gen_range(0..n)]).collect()
        } else {
            let mut pool = order.clone();
            for j in 0..k {
                let swap = rng.gen_range(j..n);
                pool.swap(j, swap);
            }
            pool.truncate(k);
            pool
        };
        match metric(&preds.subset(&chosen)) {
            Ok(v) => values.push(v),
            Err(_) => skipped += 1,
        }
    }
    if skipped * 10 > cfg.n_resamples {
        return Err(Error::BootstrapUnreliable {
            skipped,
            total: cfg.n_resamples,
        });
    }
    Ok(values)
}

/// Bootstrap quantile interval for a metric.
pub fn bootstrap_interval<F>(
    metric: F,
    preds: &PredictionSet,
    cfg: &BootstrapConfig,
) -> Result<(f64, f64)>
where
    F: Fn(&PredictionSet) -> Result<f64>,
{
    let mut values = bootstrap_distribution(metric, preds, cfg)?;
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((
        quantile(&values, cfg.quantiles.0),
        quantile(&values, cfg.quantiles.1),
    ))
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// One review-worksheet row for a sample whose predicted and reference grades
/// disagree by at least the flagging threshold. The reviewer columns are left
/// empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeErrorFlag {
    pub sample_id: String,
    pub dataset_id: String,
    pub icdr_ref: u8,
    pub grade_pred: u8,
    pub image_path: String,
    pub gradable: String,
    pub comorbidity: String,
    pub regrade: String,
}

/// Flag samples with |grade_pred - icdr_ref| >= threshold for clinician
/// review.
pub fn flag_extreme_errors(preds: &PredictionSet, threshold: u8) -> Vec<ExtremeErrorFlag> {
    preds
        .iter()
        .filter(|p| (p.grade_pred as i8 - p.icdr_ref as i8).unsigned_abs() >= threshold)
        .map(|p| ExtremeErrorFlag {
            sample_id: p.sample_id.clone(),
            dataset_id: p.dataset_id.clone(),
            icdr_ref: p.icdr_ref,
            grade_pred: p.grade_pred,
            image_path: p.image_path.clone(),
            gradable: String::new(),
            comorbidity: String::new(),
            regrade: String::new(),
        })
        .collect()
}

/// Mann-Whitney comparison against another model's resample distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub comparator: String,
    pub u_statistic: f64,
    pub p_value: f64,
}

/// Compare two per-resample metric distributions.
pub fn significance_from_resamples(
    comparator: impl Into<String>,
    ours: &[f64],
    theirs: &[f64],
) -> Result<Significance> {
    let (u, p) = mann_whitney_u(ours, theirs)?;
    Ok(Significance {
        comparator: comparator.into(),
        u_statistic: u,
        p_value: p,
    })
}

/// Options controlling a full evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    #[serde(default)]
    pub score_mode: ScoreMode,
    /// `None` disables interval estimation.
    pub bootstrap: Option<BootstrapConfig>,
    pub extreme_error_threshold: u8,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::Continuous,
            bootstrap: Some(BootstrapConfig::default()),
            extreme_error_threshold: 3,
        }
    }
}

/// The complete evaluation result for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sample_count: usize,
    pub confusion: [[u64; GRADE_COUNT]; GRADE_COUNT],
    pub mc_acc: f64,
    pub lw_kappa: Option<f64>,
    pub mse: f64,
    pub mae: f64,
    pub rdr_auc: Option<f64>,
    pub rdr_f1: f64,
    pub rdr_acc: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub intervals: BTreeMap<String, (f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<Significance>,
    pub flags: Vec<ExtremeErrorFlag>,
    /// Per-metric resample values backing `intervals`; exported to
    /// `resamples.csv` rather than serialized with the report.
    #[serde(skip)]
    pub resamples: BTreeMap<String, Vec<f64>>,
}

type MetricFn = fn(&PredictionSet, ScoreMode) -> Result<f64>;

fn metric_table() -> Vec<(&'static str, MetricFn)> {
    vec![
        ("lw_kappa", |p, _| lw_kappa(&confusion_matrix(p)?)),
        ("mae", mae),
        ("mc_acc", |p, _| mc_acc(p)),
        ("mse", mse),
        ("rdr_acc", |p, _| Ok(rdr_metrics(p)?.acc)),
        ("rdr_auc", |p, _| rdr_auc(p)),
        ("rdr_f1", |p, _| Ok(rdr_metrics(p)?.f1)),
    ]
}

/// Run the full battery over a prediction set.
pub fn evaluate(preds: &PredictionSet, opts: &EvalOptions) -> Result<EvaluationReport> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("evaluation of no samples".into()));
    }
    let confusion = confusion_matrix(preds)?;
    let kappa = match lw_kappa(&confusion) {
        Ok(k) => Some(k),
        Err(Error::UndefinedKappa) => None,
        Err(e) => return Err(e),
    };
    let rdr = rdr_metrics(preds)?;
    let mut report = EvaluationReport {
        sample_count: preds.len(),
        confusion,
        mc_acc: mc_acc(preds)?,
        lw_kappa: kappa,
        mse: mse(preds, opts.score_mode)?,
        mae: mae(preds, opts.score_mode)?,
        rdr_auc: rdr.auc,
        rdr_f1: rdr.f1,
        rdr_acc: rdr.acc,
        intervals: BTreeMap::new(),
        significance: None,
        flags: flag_extreme_errors(preds, opts.extreme_error_threshold),
        resamples: BTreeMap::new(),
    };
    if let Some(base_cfg) = &opts.bootstrap {
        let mode = opts.score_mode;
        for (name, f) in metric_table() {
            if name == "rdr_auc" && report.rdr_auc.is_none() {
                continue;
            }
            if name == "lw_kappa" && report.lw_kappa.is_none() {
                continue;
            }
            let cfg = BootstrapConfig {
                seed: rng::derive_seed(base_cfg.seed, name),
                ..base_cfg.clone()
            };
            // A metric too often undefined on resamples gets no interval;
            // the point estimate stands on its own.
            let mut values = match bootstrap_distribution(|p| f(p, mode), preds, &cfg) {
                Ok(v) => v,
                Err(Error::BootstrapUnreliable { .. }) => continue,
                Err(e) => return Err(e),
            };
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let interval = (
                quantile(&values, cfg.quantiles.0),
                quantile(&values, cfg.quantiles.1),
            );
            report.intervals.insert(name.to_string(), interval);
            report.resamples.insert(name.to_string(), values);
        }
    }
    Ok(report)
}

/// Write the 5x5 confusion matrix as CSV.
pub fn write_confusion_csv(path: &Path, confusion: &[[u64; GRADE_COUNT]; GRADE_COUNT]) -> Result<()> {
    let mut out = String::from("ref_grade,pred_0,pred_1,pred_2,pred_3,pred_4\n");
    for (i, row) in confusion.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, row[0], row[1], row[2], row[3], row[4]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the extreme-error review worksheet as CSV.
pub fn write_flags_csv(path: &Path, flags: &[ExtremeErrorFlag]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sample_id",
        "dataset_id",
        "icdr_ref",
        "grade_pred",
        "image_path",
        "gradable",
        "comorbidity",
        "regrade",
    ])?;
    for f in flags {
        w.write_record([
            f.sample_id.as_str(),
            f.dataset_id.as_str(),
            &f.icdr_ref.to_string(),
            &f.grade_pred.to_string(),
            f.image_path.as_str(),
            f.gradable.as_str(),
            f.comorbidity.as_str(),
            f.regrade.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the per-resample metric values as CSV (one row per resample per
/// metric).
pub fn write_resamples_csv(path: &Path, resamples: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "metric,resample,value")?;
    for (name, values) in resamples {
        for (i, v) in values.iter().enumerate() {
            writeln!(file, "{name},{i},{v}")?;
        }
    }
    Ok(())
}
