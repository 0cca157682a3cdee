//! Dataset manifests, exclusion rules, referable-DR labels, and leakage-free
//! training plans.
//!
//! Manifests are flat CSV files with a fixed header (see [`MANIFEST_HEADER`]).
//! Empty cells are absent optional values, booleans are serialized as `0`/`1`,
//! and ICDR grades as `0`..`4`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Exact, ordered manifest CSV header.
pub const MANIFEST_HEADER: [&str; 9] = [
    "sample_id",
    "dataset_id",
    "image_path",
    "patient_id",
    "icdr",
    "dme",
    "gradable",
    "age_years",
    "diabetic",
];

/// Minimum age (in years) retained by the exclusion rules.
pub const MIN_AGE_YEARS: f64 = 18.0;

/// One fundus image with its labels, patient linkage, and eligibility flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub image_path: String,
    pub patient_id: Option<String>,
    pub icdr: Option<u8>,
    pub dme: Option<bool>,
    pub gradable: bool,
    pub age_years: Option<f64>,
    pub diabetic: Option<bool>,
}

/// A named domain's records plus free-form provenance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub records: Vec<SampleRecord>,
    pub source_meta: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn new(dataset_id: impl Into<String>, records: Vec<SampleRecord>) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            records,
            source_meta: BTreeMap::new(),
        }
    }

    pub fn record(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }
}

/// Disjoint train/val/test sample-id sets with patient-level integrity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
}

/// Training regime: one source domain or a leave-one-domain-out join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    SingleSource,
    MultiSource,
}

/// A (dataset, sample) reference inside a training plan.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub dataset_id: String,
    pub sample_id: String,
}

impl SampleRef {
    fn of(record: &SampleRecord) -> Self {
        Self {
            dataset_id: record.dataset_id.clone(),
            sample_id: record.sample_id.clone(),
        }
    }
}

/// The train/val/eval assembly for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub mode: PlanMode,
    pub source_train: Vec<SampleRef>,
    pub joint_val: Vec<SampleRef>,
    pub target_domain: Option<String>,
    pub target_eval: Vec<SampleRef>,
}

impl TrainingPlan {
    /// Check the leakage invariants: train and val are disjoint, and no
    /// evaluation sample appears in either.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<&SampleRef> = self.source_train.iter().collect();
        let val: BTreeSet<&SampleRef> = self.joint_val.iter().collect();
        if train.intersection(&val).next().is_some() {
            return Err(Error::Schema("plan has train/val overlap".into()));
        }
        for s in &self.target_eval {
            if train.contains(s) || val.contains(s) {
                return Err(Error::Schema(format!(
                    "evaluation sample {}/{} leaks into training",
                    s.dataset_id, s.sample_id
                )));
            }
        }
        if self.mode == PlanMode::MultiSource {
            if let Some(target) = &self.target_domain {
                if self
                    .source_train
                    .iter()
                    .chain(self.joint_val.iter())
                    .any(|s| &s.dataset_id == target)
                {
                    return Err(Error::Schema(format!(
                        "target domain `{target}` leaks into training"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn parse_opt_bool(cell: &str) -> Option<bool> {
    match cell {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

/// Load a manifest CSV. Row order is preserved; unparseable optional fields
/// become absent values; parseable values violating an invariant (grade
/// range, negative age) are errors naming the offending sample.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "manifest not found: {}",
            path.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    for required in MANIFEST_HEADER {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::MissingColumn {
                column: required.to_string(),
            });
        }
    }
    for (i, expected) in MANIFEST_HEADER.iter().enumerate() {
        if headers.get(i) != Some(expected) {
            return Err(Error::Schema(format!(
                "column {} must be `{}`, found `{}`",
                i + 1,
                expected,
                headers.get(i).unwrap_or("")
            )));
        }
    }

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dataset_id: Option<String> = None;
    for (row_index, row) in reader.records().enumerate() {
        let row = row?;
        let line = row_index + 2; // header is line 1
        let cell = |i: usize| row.get(i).unwrap_or("").trim().to_string();

        let sample_id = cell(0);
        if sample_id.is_empty() {
            return Err(Error::Schema(format!("line {line}: empty sample_id")));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(Error::DuplicateSampleId { sample_id });
        }
        let ds = cell(1);
        if ds.is_empty() {
            return Err(Error::InvalidRecord {
                sample_id,
                message: format!("line {line}: empty dataset_id"),
            });
        }
        match &dataset_id {
            None => dataset_id = Some(ds.clone()),
            Some(d) if *d != ds => {
                return Err(Error::InvalidRecord {
                    sample_id,
                    message: format!("line {line}: dataset_id `{ds}` differs from `{d}`"),
                });
            }
            _ => {}
        }

        let icdr = match cell(4).as_str() {
            "" => None,
            raw => match raw.parse::<i64>() {
                Ok(v) if (0..=4).contains(&v) => Some(v as u8),
                Ok(v) => {
                    return Err(Error::InvalidRecord {
                        sample_id,
                        message: format!("line {line}: icdr grade {v} outside 0..=4"),
                    });
                }
                Err(_) => None,
            },
        };
        let gradable = match parse_opt_bool(&cell(6)) {
            Some(b) => b,
            None => {
                return Err(Error::InvalidRecord {
                    sample_id,
                    message: format!("line {line}: gradable must be 0 or 1"),
                });
            }
        };
        let age_years = match cell(7).as_str() {
            "" => None,
            raw => match raw.parse::<f64>() {
                Ok(v) if v >= 0.0 => Some(v),
                Ok(v) => {
                    return Err(Error::InvalidRecord {
                        sample_id,
                        message: format!("line {line}: negative age_years {v}"),
                    });
                }
                Err(_) => None,
            },
        };
        let patient_id = match cell(3).as_str() {
            "" => None,
            p => Some(p.to_string()),
        };

        records.push(SampleRecord {
            sample_id,
            dataset_id: ds,
            image_path: cell(2),
            patient_id,
            icdr,
            dme: parse_opt_bool(&cell(5)),
            gradable,
            age_years,
            diabetic: parse_opt_bool(&cell(8)),
        });
    }

    let mut manifest = DatasetManifest::new(dataset_id.unwrap_or_default(), records);
    manifest
        .source_meta
        .insert("source_path".into(), path.display().to_string());
    Ok(manifest)
}

/// Serialize a manifest back to the exact CSV schema.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    let opt_bool = |b: Option<bool>| b.map(|v| if v { "1" } else { "0" }.to_string());
    for r in &manifest.records {
        w.write_record([
            r.sample_id.clone(),
            r.dataset_id.clone(),
            r.image_path.clone(),
            r.patient_id.clone().unwrap_or_default(),
            r.icdr.map(|g| g.to_string()).unwrap_or_default(),
            opt_bool(r.dme).unwrap_or_default(),
            if r.gradable { "1" } else { "0" }.to_string(),
            r.age_years.map(|a| a.to_string()).unwrap_or_default(),
            opt_bool(r.diabetic).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-rule exclusion counts. Each removed record is counted under the first
/// rule it violates, in the order listed here.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionSummary {
    pub nongradable: usize,
    pub missing_icdr: usize,
    pub age_under_18: usize,
    pub nondiabetic: usize,
    pub retained: usize,
    pub total: usize,
}

fn exclusion_rule(record: &SampleRecord) -> Option<&'static str> {
    if !record.gradable {
        Some("nongradable")
    } else if record.icdr.is_none() {
        Some("missing_icdr")
    } else if record.age_years.is_some_and(|a| a < MIN_AGE_YEARS) {
        Some("age_under_18")
    } else if record.diabetic == Some(false) {
        Some("nondiabetic")
    } else {
        None
    }
}

/// Apply the exclusion rules: drop nongradable records, records without an
/// ICDR label, patients younger than 18, and known nondiabetic patients.
/// Records with absent age or diabetes status are retained.
pub fn apply_exclusions(manifest: &DatasetManifest) -> DatasetManifest {
    apply_exclusions_with_summary(manifest).0
}

/// [`apply_exclusions`] plus the per-rule counts.
pub fn apply_exclusions_with_summary(
    manifest: &DatasetManifest,
) -> (DatasetManifest, ExclusionSummary) {
    let mut summary = ExclusionSummary {
        total: manifest.records.len(),
        ..Default::default()
    };
    let mut retained = Vec::new();
    for r in &manifest.records {
        match exclusion_rule(r) {
            Some("nongradable") => summary.nongradable += 1,
            Some("missing_icdr") => summary.missing_icdr += 1,
            Some("age_under_18") => summary.age_under_18 += 1,
            Some("nondiabetic") => summary.nondiabetic += 1,
            Some(_) => unreachable!(),
            None => retained.push(r.clone()),
        }
    }
    summary.retained = retained.len();
    let mut filtered = DatasetManifest::new(manifest.dataset_id.clone(), retained);
    filtered.source_meta = manifest.source_meta.clone();
    (filtered, summary)
}

/// Referable DR: ICDR of two or more, or diabetic macular edema present.
pub fn derive_rdr(record: &SampleRecord) -> Result<bool> {
    let icdr = record
        .icdr
        .ok_or_else(|| Error::MissingLabel(format!("icdr absent for `{}`", record.sample_id)))?;
    Ok(icdr >= 2 || record.dme == Some(true))
}

/// Group records by patient; records without a patient id are singleton
/// patients. Keys are sorted so the grouping is independent of row order.
fn patients_of(records: &[SampleRecord]) -> BTreeMap<String, Vec<&SampleRecord>> {
    let mut groups: BTreeMap<String, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        let key = match &r.patient_id {
            Some(p) => format!("p:{p}"),
            None => format!("s:{}", r.sample_id),
        };
        groups.entry(key).or_default().push(r);
    }
    groups
}

/// Seeded shuffle of patient keys followed by a greedy fill of the
/// held-out quota by record count. Returns (kept, held_out) id sets.
fn partition_by_patients(
    records: &[SampleRecord],
    held_out_fraction: f64,
    seed: u64,
    stream: &str,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let groups = patients_of(records);
    let mut keys: Vec<&String> = groups.keys().collect();
    let mut rng = rng::substream(seed, stream);
    keys.shuffle(&mut rng);

    let quota = held_out_fraction * records.len() as f64;
    let mut held = BTreeSet::new();
    let mut kept = BTreeSet::new();
    let mut held_count = 0usize;
    for key in keys {
        let members = &groups[key];
        if (held_count as f64) < quota {
            held_count += members.len();
            held.extend(members.iter().map(|r| r.sample_id.clone()));
        } else {
            kept.extend(members.iter().map(|r| r.sample_id.clone()));
        }
    }
    (kept, held)
}

/// Patient-stratified train/validation split. All records of a patient land
/// in the same partition; the validation record count approaches
/// `val_fraction` as closely as patient granularity permits. Deterministic
/// given the seed and independent of record order.
pub fn split_patient_stratified(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "manifest `{}` has no records",
            manifest.dataset_id
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let (train_ids, val_ids) =
        partition_by_patients(&manifest.records, val_fraction, seed, "patient-split");
    Ok(SplitSpec {
        train_ids,
        val_ids,
        test_ids: BTreeSet::new(),
        seed,
    })
}

const PLAN_VAL_FRACTION: f64 = 0.1; // the protocol's 90:10 split
const PLAN_TEST_FRACTION: f64 = 0.1; // held-out test carved in single-source mode

fn refs_for<'a>(
    manifest: &'a DatasetManifest,
    ids: &BTreeSet<String>,
) -> impl Iterator<Item = SampleRef> + 'a {
    let ids = ids.clone();
    manifest
        .records
        .iter()
        .filter(move |r| ids.contains(&r.sample_id))
        .map(SampleRef::of)
}

/// Assemble a training plan.
///
/// Multi-source: every manifest except `target_domain` is split 90:10 at
/// patient granularity; the train parts are concatenated into `source_train`,
/// the validation parts into `joint_val`, and the whole target manifest
/// becomes `target_eval`.
///
/// Single-source: exactly one source manifest. When `target_domain` names a
/// second manifest, that manifest is the designated held-out test; otherwise
/// a 10% patient-stratified test is carved from the source before the 90:10
/// train/validation split.
pub fn assemble_plan(
    mode: PlanMode,
    manifests: &[DatasetManifest],
    target_domain: Option<&str>,
    seed: u64,
) -> Result<TrainingPlan> {
    if manifests.is_empty() {
        return Err(Error::EmptyInput("no manifests supplied".into()));
    }
    let plan = match mode {
        PlanMode::MultiSource => {
            let target = target_domain.ok_or_else(|| {
                Error::InvalidArgument("multi-source mode requires a target domain".into())
            })?;
            let target_manifest = manifests
                .iter()
                .find(|m| m.dataset_id == target)
                .ok_or_else(|| Error::UnknownDomain(target.to_string()))?;
            let sources: Vec<&DatasetManifest> = manifests
                .iter()
                .filter(|m| m.dataset_id != target)
                .collect();
            if sources.is_empty() {
                return Err(Error::InvalidArgument(
                    "multi-source mode requires at least one source domain".into(),
                ));
            }
            let mut source_train = Vec::new();
            let mut joint_val = Vec::new();
            for m in sources {
                let split_seed = rng::derive_seed(seed, &format!("split:{}", m.dataset_id));
                let split = split_patient_stratified(m, PLAN_VAL_FRACTION, split_seed)?;
                source_train.extend(refs_for(m, &split.train_ids));
                joint_val.extend(refs_for(m, &split.val_ids));
            }
            TrainingPlan {
                mode,
                source_train,
                joint_val,
                target_domain: Some(target.to_string()),
                target_eval: target_manifest.records.iter().map(SampleRef::of).collect(),
            }
        }
        PlanMode::SingleSource => {
            let (source, eval_manifest) = match target_domain {
                Some(target) => {
                    let eval = manifests
                        .iter()
                        .find(|m| m.dataset_id == target)
                        .ok_or_else(|| Error::UnknownDomain(target.to_string()))?;
                    let rest: Vec<&DatasetManifest> = manifests
                        .iter()
                        .filter(|m| m.dataset_id != target)
                        .collect();
                    if rest.len() != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "single-source mode requires exactly one source manifest, found {}",
                            rest.len()
                        )));
                    }
                    (rest[0], Some(eval))
                }
                None => {
                    if manifests.len() != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "single-source mode requires exactly one source manifest, found {}",
                            manifests.len()
                        )));
                    }
                    (&manifests[0], None)
                }
            };
            match eval_manifest {
                Some(eval) => {
                    let split_seed = rng::derive_seed(seed, &format!("split:{}", source.dataset_id));
                    let split = split_patient_stratified(source, PLAN_VAL_FRACTION, split_seed)?;
                    TrainingPlan {
                        mode,
                        source_train: refs_for(source, &split.train_ids).collect(),
                        joint_val: refs_for(source, &split.val_ids).collect(),
                        target_domain: Some(eval.dataset_id.clone()),
                        target_eval: eval.records.iter().map(SampleRef::of).collect(),
                    }
                }
                None => {
                    let (kept_ids, test_ids) = partition_by_patients(
                        &source.records,
                        PLAN_TEST_FRACTION,
                        rng::derive_seed(seed, &format!("test-carve:{}", source.dataset_id)),
                        "test-carve",
                    );
                    let kept: Vec<SampleRecord> = source
                        .records
                        .iter()
                        .filter(|r| kept_ids.contains(&r.sample_id))
                        .cloned()
                        .collect();
                    let (train_ids, val_ids) = partition_by_patients(
                        &kept,
                        PLAN_VAL_FRACTION,
                        rng::derive_seed(seed, &format!("split:{}", source.dataset_id)),
                        "patient-split",
                    );
                    TrainingPlan {
                        mode,
                        source_train: refs_for(source, &train_ids).collect(),
                        joint_val: refs_for(source, &val_ids).collect(),
                        target_domain: None,
                        target_eval: refs_for(source, &test_ids).collect(),
                    }
                }
            }
        }
    };
    plan.validate()?;
    Ok(plan)
}
