//! Synthetic desk-scale data: blob-count fundus stand-ins, random manifests,
//! and random attention traces. Used by the test suites and by demo runs.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::ingest::{DatasetManifest, SampleRecord};
use crate::model::{AttentionTrace, TraceBlock};
use crate::preprocess::{write_png, ImageTensor, Stage};
use crate::rng;

/// Render `count` bright blobs on a dark noisy background. The blob count is
/// the image's grade, which makes the regression target analytically present
/// in the pixels.
pub fn blob_image(side: usize, count: u8, rng: &mut impl Rng) -> ImageTensor {
    let mut img = ImageTensor::filled(side, side, 0.0);
    for v in img.pixels.iter_mut() {
        *v = rng.gen_range(15.0..25.0);
    }
    // Blobs occupy distinct cells of a 4x4 layout grid.
    let cell = side / 4;
    let blob = (cell * 3) / 4;
    let mut slots: Vec<(usize, usize)> = (0..4)
        .flat_map(|cy| (0..4).map(move |cx| (cy, cx)))
        .collect();
    slots.shuffle(rng);
    for &(cy, cx) in slots.iter().take(count as usize) {
        let y0 = cy * cell + (cell - blob) / 2;
        let x0 = cx * cell + (cell - blob) / 2;
        let level: f64 = rng.gen_range(200.0..240.0);
        for y in y0..y0 + blob {
            for x in x0..x0 + blob {
                for c in 0..3 {
                    let noise: f64 = rng.gen_range(-8.0..8.0);
                    img.set(y, x, c, (level + noise).clamp(0.0, 255.0));
                }
            }
        }
    }
    img
}

/// A balanced blob-count dataset of `(image, grade)` pairs at stage
/// `Resized`, ready for direct training.
pub fn blob_dataset(n: usize, side: usize, seed: u64) -> Vec<(ImageTensor, u8)> {
    let mut rng = rng::substream(seed, "blobs");
    (0..n)
        .map(|i| {
            let grade = (i % 5) as u8;
            let mut img = blob_image(side, grade, &mut rng);
            img.stage = Stage::Resized;
            (img, grade)
        })
        .collect()
}

/// Write a blob dataset to disk as PNGs plus a manifest CSV; consecutive
/// pairs of samples share a patient. Returns the manifest path.
pub fn write_blob_dataset(
    dir: &Path,
    dataset_id: &str,
    n: usize,
    side: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut rng = rng::substream(seed, &format!("blobs:{dataset_id}"));
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let grade = (i % 5) as u8;
        let img = blob_image(side, grade, &mut rng);
        let file = dir.join(format!("{dataset_id}-{i:04}.png"));
        write_png(&file, &img)?;
        records.push(SampleRecord {
            sample_id: format!("{dataset_id}-{i:04}"),
            dataset_id: dataset_id.to_string(),
            image_path: file.display().to_string(),
            patient_id: Some(format!("{dataset_id}-pat{:03}", i / 2)),
            icdr: Some(grade),
            dme: if grade >= 3 { Some(true) } else { None },
            gradable: true,
            age_years: None,
            diabetic: None,
        });
    }
    let manifest = DatasetManifest::new(dataset_id, records);
    let path = dir.join(format!("{dataset_id}.csv"));
    crate::ingest::write_manifest(&manifest, &path)?;
    Ok(path)
}

/// A random manifest with patient groups of varying size, some anonymous
/// records, and a sprinkling of exclusion-rule violations.
pub fn random_manifest(dataset_id: &str, seed: u64) -> DatasetManifest {
    let mut rng = rng::substream(seed, &format!("manifest:{dataset_id}"));
    let n_patients = rng.gen_range(3..15);
    let mut records = Vec::new();
    for p in 0..n_patients {
        let group = rng.gen_range(1..4);
        let anonymous = rng.gen_bool(0.2);
        for k in 0..group {
            let idx = records.len();
            records.push(SampleRecord {
                sample_id: format!("{dataset_id}-s{idx:04}"),
                dataset_id: dataset_id.to_string(),
                image_path: format!("{dataset_id}-s{idx:04}.png"),
                patient_id: if anonymous {
                    None
                } else {
                    Some(format!("{dataset_id}-p{p:03}"))
                },
                icdr: if rng.gen_bool(0.9) {
                    Some(rng.gen_range(0..5))
                } else {
                    None
                },
                dme: if rng.gen_bool(0.3) {
                    Some(rng.gen_bool(0.4))
                } else {
                    None
                },
                gradable: rng.gen_bool(0.92),
                age_years: if rng.gen_bool(0.5) {
                    Some(rng.gen_range(10.0..90.0))
                } else {
                    None
                },
                diabetic: if rng.gen_bool(0.4) {
                    Some(rng.gen_bool(0.85))
                } else {
                    None
                },
            });
            let _ = k;
        }
    }
    DatasetManifest::new(dataset_id, records)
}

/// A random attention trace: row-stochastic attention from softmaxed logits,
/// standard-normal gradients.
pub fn random_trace(heads: usize, tokens: usize, depth: usize, seed: u64) -> AttentionTrace {
    let mut rng = rng::substream(seed, "trace");
    let blocks = (0..depth)
        .map(|_| {
            let mut attention = Array3::zeros((heads, tokens, tokens));
            let mut grad = Array3::zeros((heads, tokens, tokens));
            for h in 0..heads {
                for i in 0..tokens {
                    let logits: Vec<f64> = (0..tokens).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..tokens {
                        attention[(h, i, j)] = exps[j] / sum;
                        grad[(h, i, j)] = rng::normal(&mut rng);
                    }
                }
            }
            TraceBlock { attention, grad }
        })
        .collect();
    AttentionTrace { blocks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_images_encode_their_grade_in_brightness() {
        let mut rng = rng::substream(0, "blob-test");
        let dark = blob_image(32, 0, &mut rng);
        let bright = blob_image(32, 4, &mut rng);
        let mean = |img: &ImageTensor| img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
        assert!(mean(&bright) > mean(&dark) + 20.0);
    }

    #[test]
    fn blob_dataset_is_balanced_and_deterministic() {
        let a = blob_dataset(20, 32, 5);
        let b = blob_dataset(20, 32, 5);
        assert_eq!(a.len(), 20);
        for ((ia, ga), (ib, gb)) in a.iter().zip(&b) {
            assert_eq!(ga, gb);
            assert_eq!(ia.pixels, ib.pixels);
        }
        let count4 = a.iter().filter(|(_, g)| *g == 4).count();
        assert_eq!(count4, 4);
    }

    #[test]
    fn random_traces_are_row_stochastic() {
        let trace = random_trace(3, 9, 2, 11);
        trace.validate().unwrap();
    }
}
