//! Fundus image preprocessing: the deterministic crop -> pad -> resize chain,
//! training-time augmentations, model-input normalization, and a binary cache
//! keyed by sample id and chain version.
//!
//! Pixels are stored row-major as `(y, x, channel)` triples of `f64` in
//! `[0, 255]` until [`to_model_input`] converts them to normalized
//! channel-major tensors.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default maximum channel intensity below which a row counts as black.
pub const DEFAULT_BLACK_THRESHOLD: f64 = 10.0;

/// Canonical model input side used by the full-scale pipeline.
pub const MODEL_INPUT_SIDE: usize = 518;

const CHANNELS: usize = 3;

/// Where an image sits in the preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Cropped,
    Padded,
    Resized,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Cropped => "cropped",
            Stage::Padded => "padded",
            Stage::Resized => "resized",
        }
    }
}

/// An H x W x 3 image with intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub stage: Stage,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, stage: Stage) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            stage,
        })
    }

    /// A raw image with every channel set to `value`.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width * CHANNELS],
            stage: Stage::Raw,
        }
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.pixels[i] = v;
    }

    fn expect_stage(&self, op: &'static str, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::WrongStage {
                op,
                expected: allowed[0].name(),
                actual: self.stage.name(),
            })
        }
    }
}

/// Stochastic training-time augmentation parameters. Each jitter amplitude of
/// zero disables that augmentation exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub horizontal_flip_prob: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
    pub hue_jitter: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            contrast_jitter: 0.2,
            saturation_jitter: 0.2,
            hue_jitter: 0.02,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: no flips, no jitter.
    pub fn identity() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            contrast_jitter: 0.0,
            saturation_jitter: 0.0,
            hue_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::InvalidConfig(format!(
                "horizontal_flip_prob {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        for (name, v) in [
            ("contrast_jitter", self.contrast_jitter),
            ("saturation_jitter", self.saturation_jitter),
            ("hue_jitter", self.hue_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Deterministic-chain parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub black_threshold: f64,
    pub target_side: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            black_threshold: DEFAULT_BLACK_THRESHOLD,
            target_side: MODEL_INPUT_SIDE,
        }
    }
}

/// Channel-wise normalization statistics expected by a pretrained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// The ImageNet statistics used by the common pretrained backbones.
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self::imagenet()
    }
}

/// A normalized channel-major (C x side x side) model input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub side: usize,
    pub data: Vec<f64>,
}

/// Load a PNG or JPEG file as a raw image.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Vec::with_capacity(h * w * CHANNELS);
    for p in img.pixels() {
        pixels.push(f64::from(p.0[0]));
        pixels.push(f64::from(p.0[1]));
        pixels.push(f64::from(p.0[2]));
    }
    ImageTensor::new(h, w, pixels, Stage::Raw)
}

/// Write an image as an 8-bit PNG, clamping and rounding intensities.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [
                img.get(y, x, 0).clamp(0.0, 255.0).round() as u8,
                img.get(y, x, 1).clamp(0.0, 255.0).round() as u8,
                img.get(y, x, 2).clamp(0.0, 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

fn row_is_black(img: &ImageTensor, y: usize, threshold: f64) -> bool {
    (0..img.width).all(|x| {
        let m = img.get(y, x, 0).max(img.get(y, x, 1)).max(img.get(y, x, 2));
        m < threshold
    })
}

/// Remove the maximal contiguous top and bottom row bands in which every
/// pixel's maximum channel intensity is below `black_threshold`. Interior
/// rows are untouched. Idempotent.
pub fn crop_black_rows(img: &ImageTensor, black_threshold: f64) -> Result<ImageTensor> {
    img.expect_stage("crop_black_rows", &[Stage::Raw, Stage::Cropped])?;
    let mut top = 0;
    while top < img.height && row_is_black(img, top, black_threshold) {
        top += 1;
    }
    if top == img.height {
        return Err(Error::DegenerateImage(
            "every row is below the black threshold".into(),
        ));
    }
    let mut bottom = img.height;
    while bottom > top && row_is_black(img, bottom - 1, black_threshold) {
        bottom -= 1;
    }
    let new_h = bottom - top;
    let mut pixels = Vec::with_capacity(new_h * img.width * CHANNELS);
    pixels.extend_from_slice(
        &img.pixels[top * img.width * CHANNELS..bottom * img.width * CHANNELS],
    );
    ImageTensor::new(new_h, img.width, pixels, Stage::Cropped)
}

/// Pad to a square whose side is the longest axis, centering the content on
/// black (0, 0, 0) bands.
pub fn pad_to_square(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect_stage("pad_to_square", &[Stage::Cropped])?;
    let side = img.height.max(img.width);
    let top = (side - img.height) / 2;
    let left = (side - img.width) / 2;
    let mut out = ImageTensor {
        height: side,
        width: side,
        pixels: vec![0.0; side * side * CHANNELS],
        stage: Stage::Padded,
    };
    for y in 0..img.height {
        let src = y * img.width * CHANNELS;
        let dst = ((y + top) * side + left) * CHANNELS;
        out.pixels[dst..dst + img.width * CHANNELS]
            .copy_from_slice(&img.pixels[src..src + img.width * CHANNELS]);
    }
    Ok(out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize with half-pixel-center sampling (corner alignment off).
/// Constants are preserved exactly and the identity scale is a copy.
pub fn resize_bilinear(img: &ImageTensor, side: usize) -> Result<ImageTensor> {
    img.expect_stage("resize_bilinear", &[Stage::Padded])?;
    if side == 0 {
        return Err(Error::InvalidArgument("resize side must be positive".into()));
    }
    let (src_h, src_w) = (img.height, img.width);
    let scale_y = src_h as f64 / side as f64;
    let scale_x = src_w as f64 / side as f64;
    let mut out = ImageTensor {
        height: side,
        width: side,
        pixels: vec![0.0; side * side * CHANNELS],
        stage: Stage::Resized,
    };
    for y in 0..side {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..side {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            for c in 0..CHANNELS {
                let top = lerp(img.get(y0, x0, c), img.get(y0, x1, c), fx);
                let bot = lerp(img.get(y1, x0, c), img.get(y1, x1, c), fx);
                out.set(y, x, c, lerp(top, bot, fy));
            }
        }
    }
    Ok(out)
}

/// The full deterministic chain: crop black rows, pad to square, resize.
pub fn preprocess_chain(img: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let cropped = crop_black_rows(img, cfg.black_threshold)?;
    let padded = pad_to_square(&cropped)?;
    resize_bilinear(&padded, cfg.target_side)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Apply, in order: horizontal flip (with the configured probability),
/// multiplicative contrast jitter, saturation jitter, and additive hue
/// rotation. All draws come from the substream derived from `cfg.seed` and
/// `draw_seed`; intensities are clamped back to `[0, 255]`.
pub fn augment(img: &ImageTensor, cfg: &AugmentConfig, draw_seed: u64) -> Result<ImageTensor> {
    img.expect_stage("augment", &[Stage::Resized])?;
    cfg.validate()?;
    let mut rng = rng::substream_indexed(cfg.seed, "augment", draw_seed);

    // Draw every factor unconditionally so the stream layout does not depend
    // on which augmentations are enabled.
    let flip_u: f64 = rng.gen();
    let contrast = rng.gen_range(
        (1.0 - cfg.contrast_jitter).max(0.0)..=1.0 + cfg.contrast_jitter,
    );
    let saturation = rng.gen_range(
        (1.0 - cfg.saturation_jitter).max(0.0)..=1.0 + cfg.saturation_jitter,
    );
    let hue_delta = rng.gen_range(-cfg.hue_jitter..=cfg.hue_jitter);

    let mut out = img.clone();
    if flip_u < cfg.horizontal_flip_prob {
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..CHANNELS {
                    out.set(y, x, c, img.get(y, img.width - 1 - x, c));
                }
            }
        }
    }
    if cfg.contrast_jitter > 0.0 {
        let mean_luma = (0..out.height)
            .flat_map(|y| (0..out.width).map(move |x| (y, x)))
            .map(|(y, x)| luma(out.get(y, x, 0), out.get(y, x, 1), out.get(y, x, 2)))
            .sum::<f64>()
            / (out.height * out.width) as f64;
        for v in out.pixels.iter_mut() {
            *v = (contrast * *v + (1.0 - contrast) * mean_luma).clamp(0.0, 255.0);
        }
    }
    if cfg.saturation_jitter > 0.0 {
        for y in 0..out.height {
            for x in 0..out.width {
                let l = luma(out.get(y, x, 0), out.get(y, x, 1), out.get(y, x, 2));
                for c in 0..CHANNELS {
                    let v = saturation * out.get(y, x, c) + (1.0 - saturation) * l;
                    out.set(y, x, c, v.clamp(0.0, 255.0));
                }
            }
        }
    }
    if cfg.hue_jitter > 0.0 {
        for y in 0..out.height {
            for x in 0..out.width {
                let (h, s, v) = rgb_to_hsv(
                    out.get(y, x, 0) / 255.0,
                    out.get(y, x, 1) / 255.0,
                    out.get(y, x, 2) / 255.0,
                );
                let (r, g, b) = hsv_to_rgb(h + hue_delta, s, v);
                out.set(y, x, 0, (r * 255.0).clamp(0.0, 255.0));
                out.set(y, x, 1, (g * 255.0).clamp(0.0, 255.0));
                out.set(y, x, 2, (b * 255.0).clamp(0.0, 255.0));
            }
        }
    }
    Ok(out)
}

/// Scale intensities to `[0, 1]` and apply channel-wise mean/std
/// normalization, producing a channel-major tensor.
pub fn to_model_input(img: &ImageTensor, stats: &ChannelStats) -> Result<ModelInput> {
    img.expect_stage("to_model_input", &[Stage::Resized])?;
    if img.height != img.width {
        return Err(Error::ShapeMismatch(format!(
            "resized image must be square, got {}x{}",
            img.height, img.width
        )));
    }
    let side = img.height;
    let mut data = vec![0.0; CHANNELS * side * side];
    for c in 0..CHANNELS {
        let (mean, std) = (stats.mean[c], stats.std[c]);
        for y in 0..side {
            for x in 0..side {
                data[c * side * side + y * side + x] =
                    (img.get(y, x, c) / 255.0 - mean) / std;
            }
        }
    }
    Ok(ModelInput { side, data })
}

/// Version tag of the deterministic chain; bump when the chain semantics
/// change so stale cache entries are ignored.
const CHAIN_VERSION: u64 = 1;

/// Hash of the chain parameters, used as the cache key component.
pub fn chain_version_hash(cfg: &PreprocessConfig) -> u64 {
    let mut h = rng::derive_seed(CHAIN_VERSION, "chain-version");
    h ^= cfg.black_threshold.to_bits().rotate_left(17);
    h = h.wrapping_mul(0x100_0000_01b3);
    h ^= cfg.target_side as u64;
    h
}

/// Binary cache of preprocessed tensors keyed by `(sample_id, chain hash)`.
pub struct PreprocCache {
    root: PathBuf,
}

const CACHE_MAGIC: &[u8; 4] = b"DRSC";

impl PreprocCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    fn entry_path(&self, sample_id: &str, version: u64) -> PathBuf {
        let safe: String = sample_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let disambiguator = rng::derive_seed(version, sample_id);
        self.root
            .join(format!("{safe}-{disambiguator:016x}-{version:016x}.bin"))
    }

    pub fn load(&self, sample_id: &str, version: u64) -> Option<ImageTensor> {
        let path = self.entry_path(sample_id, version);
        let mut file = std::fs::File::open(path).ok()?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).ok()?;
        if &magic != CACHE_MAGIC {
            return None;
        }
        let mut dims = [0u8; 8];
        file.read_exact(&mut dims).ok()?;
        let h = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw).ok()?;
        if raw.len() != h * w * CHANNELS * 8 {
            return None;
        }
        let pixels: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        ImageTensor::new(h, w, pixels, Stage::Resized).ok()
    }

    pub fn store(&self, sample_id: &str, version: u64, img: &ImageTensor) -> Result<()> {
        let mut file = std::fs::File::create(self.entry_path(sample_id, version))?;
        file.write_all(CACHE_MAGIC)?;
        file.write_all(&(img.height as u32).to_le_bytes())?;
        file.write_all(&(img.width as u32).to_le_bytes())?;
        for v in &img.pixels {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Fetch from the cache or compute and store.
    pub fn get_or_compute<F>(&self, sample_id: &str, version: u64, compute: F) -> Result<ImageTensor>
    where
        F: FnOnce() -> Result<ImageTensor>,
    {
        if let Some(hit) = self.load(sample_id, version) {
            return Ok(hit);
        }
        let img = compute()?;
        self.store(sample_id, version, &img)?;
        Ok(img)
    }
}
