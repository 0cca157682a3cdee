//! Gradient-weighted attention rollout and the plain rollout baseline.
//!
//! Both methods run the same recursion over the captured per-block attention:
//! the accumulator starts from block 0, every later block contributes an
//! update matrix `0.5 * (g(A ⊙ W) + I)` that left-multiplies the accumulator,
//! and the accumulator is L1 row-normalized at the end of every step
//! (including the initial one, so degenerate later blocks leave the block-0
//! heatmap unchanged). `g` reduces over heads and zeroes the lowest entries.
//! The CLS row and column of the final accumulator are averaged, reshaped to
//! the patch grid, and bilinearly upsampled to the heatmap resolution.

use ndarray::{Array2, Array3, ArrayView2};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::AttentionTrace;
use crate::preprocess::{ImageTensor, Stage};

/// Output resolution of rendered heatmaps.
pub const HEATMAP_SIDE: usize = 518;

/// Fraction of update-matrix entries zeroed by default in grad-rollout.
pub const DEFAULT_DROP_FRACTION: f64 = 0.10;

/// How per-head attention collapses to one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadReduce {
    Max,
    Mean,
}

/// Rollout variant parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub head_reduce: HeadReduce,
    pub drop_fraction: f64,
    /// Also gradient-weight block 0 (the recursion as written leaves the
    /// initial block unweighted).
    pub weight_block0: bool,
}

impl RolloutConfig {
    pub fn grad_rollout(drop_fraction: f64) -> Self {
        Self {
            head_reduce: HeadReduce::Max,
            drop_fraction,
            weight_block0: false,
        }
    }

    pub fn plain() -> Self {
        Self {
            head_reduce: HeadReduce::Mean,
            drop_fraction: 0.0,
            weight_block0: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::InvalidArgument(format!(
                "drop_fraction {} outside [0, 1)",
                self.drop_fraction
            )));
        }
        Ok(())
    }
}

/// A patch-level attribution grid and its upsampled rendering, both min-max
/// normalized to `[0, 1]` (all zeros when constant).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub patch_grid: Array2<f64>,
    pub map: Array2<f64>,
}

impl Heatmap {
    pub fn grid_side(&self) -> usize {
        self.patch_grid.nrows()
    }
}

fn head_reduce(block: &Array3<f64>, mode: HeadReduce) -> Array2<f64> {
    let (heads, s, _) = block.dim();
    let mut out = Array2::zeros((s, s));
    match mode {
        HeadReduce::Max => {
            out.fill(f64::NEG_INFINITY);
            for h in 0..heads {
                let a = block.index_axis(ndarray::Axis(0), h);
                out.zip_mut_with(&a, |o, &v| *o = o.max(v));
            }
        }
        HeadReduce::Mean => {
            for h in 0..heads {
                out += &block.index_axis(ndarray::Axis(0), h);
            }
            out /= heads as f64;
        }
    }
    out
}

/// Zero the `k` smallest entries of the matrix; ties broken by first
/// occurrence in row-major order.
fn zero_lowest(mat: &mut Array2<f64>, k: usize) {
    if k == 0 {
        return;
    }
    let flat: Vec<f64> = mat.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[a].partial_cmp(&flat[b]).unwrap().then(a.cmp(&b)));
    let slice = mat.as_slice_mut().expect("row-major matrix");
    for &idx in order.iter().take(k.min(slice.len())) {
        slice[idx] = 0.0;
    }
}

/// L1 row normalization; rows with (near-)zero sums are left unchanged.
fn normalize_rows(mat: &mut Array2<f64>) {
    for mut row in mat.rows_mut() {
        let sum: f64 = row.sum();
        if sum.abs() > 1e-12 {
            row /= sum;
        }
    }
}

fn rollout_accumulator(
    trace: &AttentionTrace,
    use_grads: bool,
    cfg: &RolloutConfig,
) -> Result<Array2<f64>> {
    if trace.blocks.is_empty() {
        return Err(Error::EmptyInput("attention trace has no blocks".into()));
    }
    cfg.validate()?;
    let s = trace.token_count();
    let k = (cfg.drop_fraction * (s * s) as f64).floor() as usize;

    let weighted = |idx: usize| -> Array2<f64> {
        let block = &trace.blocks[idx];
        if use_grads {
            let mut prod = block.attention.clone();
            prod.zip_mut_with(&block.grad, |a, &w| *a *= w);
            head_reduce(&prod, cfg.head_reduce)
        } else {
            head_reduce(&block.attention, cfg.head_reduce)
        }
    };

    let mut acc = if cfg.weight_block0 && use_grads {
        let mut base = weighted(0);
        zero_lowest(&mut base, k);
        base
    } else {
        head_reduce(&trace.blocks[0].attention, cfg.head_reduce)
    };
    normalize_rows(&mut acc);

    for b in 1..trace.blocks.len() {
        let mut update = weighted(b);
        zero_lowest(&mut update, k);
        let mut step = update; // 0.5 * (update + I)
        step *= 0.5;
        for i in 0..s {
            step[(i, i)] += 0.5;
        }
        acc = step.dot(&acc);
        normalize_rows(&mut acc);
    }
    Ok(acc)
}

/// Average the CLS row and column (skipping the CLS self-entry) into the
/// patch attribution vector.
fn cls_attribution(acc: ArrayView2<f64>) -> Vec<f64> {
    let s = acc.nrows();
    (1..s).map(|i| 0.5 * (acc[(0, i)] + acc[(i, 0)])).collect()
}

fn min_max_normalize(values: &mut Array2<f64>) {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if max - min < 1e-12 {
        values.fill(0.0);
    } else {
        values.mapv_inplace(|v| (v - min) / (max - min));
    }
}

/// Bilinear upsampling of a square grid with half-pixel-center sampling.
fn upsample_grid(grid: &Array2<f64>, out_side: usize) -> Array2<f64> {
    let src = grid.nrows();
    let scale = src as f64 / out_side as f64;
    let mut out = Array2::zeros((out_side, out_side));
    for y in 0..out_side {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_side {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let fx = sx - x0 as f64;
            let top = grid[(y0, x0)] + fx * (grid[(y0, x1)] - grid[(y0, x0)]);
            let bot = grid[(y1, x0)] + fx * (grid[(y1, x1)] - grid[(y1, x0)]);
            out[(y, x)] = top + fy * (bot - top);
        }
    }
    out
}

fn finish_heatmap(acc: &Array2<f64>) -> Result<Heatmap> {
    let s = acc.nrows();
    let patches = s - 1;
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(Error::Geometry(format!(
            "{patches} patch tokens do not form a square grid"
        )));
    }
    let attribution = cls_attribution(acc.view());
    let mut grid = Array2::from_shape_vec((side, side), attribution).expect("square grid");
    min_max_normalize(&mut grid);
    let mut map = upsample_grid(&grid, HEATMAP_SIDE);
    min_max_normalize(&mut map);
    Ok(Heatmap {
        patch_grid: grid,
        map,
    })
}

/// Gradient-weighted rollout with head-max reduction and the given drop
/// fraction.
pub fn grad_rollout(trace: &AttentionTrace, drop_fraction: f64) -> Result<Heatmap> {
    grad_rollout_with(trace, &RolloutConfig::grad_rollout(drop_fraction))
}

/// Gradient-weighted rollout with explicit configuration.
pub fn grad_rollout_with(trace: &AttentionTrace, cfg: &RolloutConfig) -> Result<Heatmap> {
    let acc = rollout_accumulator(trace, true, cfg)?;
    finish_heatmap(&acc)
}

/// Classical rollout: unit weights, head-mean reduction, no entry dropping.
pub fn plain_rollout(trace: &AttentionTrace) -> Result<Heatmap> {
    let acc = rollout_accumulator(trace, false, &RolloutConfig::plain())?;
    finish_heatmap(&acc)
}

fn colormap(v: f64) -> [f64; 3] {
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Alpha-blend the color-mapped heatmap over a 518x518 fundus image.
pub fn overlay(heatmap: &Heatmap, img: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if img.stage != Stage::Resized {
        return Err(Error::WrongStage {
            op: "overlay",
            expected: "resized",
            actual: "other",
        });
    }
    if img.height != HEATMAP_SIDE || img.width != HEATMAP_SIDE {
        return Err(Error::ShapeMismatch(format!(
            "overlay base must be {HEATMAP_SIDE}x{HEATMAP_SIDE}, got {}x{}",
            img.height, img.width
        )));
    }
    let mut out = img.clone();
    for y in 0..HEATMAP_SIDE {
        for x in 0..HEATMAP_SIDE {
            let heat = colormap(heatmap.map[(y, x)]);
            #[allow(clippy::needless_range_loop)]
            for c in 0..3 {
                let v = (1.0 - alpha) * img.get(y, x, c) + alpha * 255.0 * heat[c];
                out.set(y, x, c, v.clamp(0.0, 255.0));
            }
        }
    }
    Ok(out)
}

/// Write the upsampled heatmap as a grayscale PNG.
pub fn write_heatmap_png(path: &Path, heatmap: &Heatmap) -> Result<()> {
    let side = heatmap.map.nrows();
    let mut img = image::GrayImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let v = (heatmap.map[(y, x)] * 255.0).clamp(0.0, 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write the pre-upsampling patch grid as a flat CSV matrix.
pub fn write_patch_grid_csv(path: &Path, heatmap: &Heatmap) -> Result<()> {
    let mut out = String::new();
    for row in heatmap.patch_grid.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
