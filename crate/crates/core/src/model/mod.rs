//! Transformer backbone with attention capture, a two-layer regression head,
//! and checkpoint I/O.
//!
//! The backbone is pluggable through [`BackboneKind`]: the built-in ViT
//! supports attention tracing; the patch-pooling baseline does not and
//! reports that through [`Model::supports_attention_trace`]. Pretrained
//! weights load through the descriptor named by
//! [`BackboneConfig::pretrained_source`].

mod checkpoint;
mod params;
mod pooled;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, WeightDescriptor};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::preprocess::{ChannelStats, ModelInput};
use crate::rng;

use params::ParamStore;
use pooled::{PooledIds, PooledModel};
use vit::{HeadIds, VitIds, VitModel, MLP_RATIO};

/// Backbone architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Vision transformer; supports attention tracing.
    Vit,
    /// Patch-pooling baseline; no attention mechanism.
    Pooled,
}

/// Backbone geometry and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default = "default_kind")]
    pub kind: BackboneKind,
    /// Path of a weight descriptor file; `None` builds a freshly initialized
    /// backbone.
    #[serde(default)]
    pub pretrained_source: Option<String>,
    /// Channel statistics the backbone expects its inputs normalized with.
    #[serde(default)]
    pub normalization: ChannelStats,
}

fn default_kind() -> BackboneKind {
    BackboneKind::Vit
}

impl BackboneConfig {
    /// ViT-base geometry at the pipeline's canonical input side.
    pub fn vit_base() -> Self {
        Self {
            image_side: 518,
            patch_side: 14,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            kind: BackboneKind::Vit,
            pretrained_source: None,
            normalization: ChannelStats::imagenet(),
        }
    }

    /// Two-block desk-scale configuration used by the synthetic experiments.
    pub fn toy() -> Self {
        Self {
            image_side: 32,
            patch_side: 8,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            kind: BackboneKind::Vit,
            pretrained_source: None,
            normalization: ChannelStats::imagenet(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.patch_side == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("zero-sized backbone dimension".into()));
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::InvalidConfig(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        match self.kind {
            BackboneKind::Vit => {
                if self.depth == 0 || self.num_heads == 0 {
                    return Err(Error::InvalidConfig("ViT needs depth and heads".into()));
                }
                if !self.embed_dim.is_multiple_of(self.num_heads) {
                    return Err(Error::InvalidConfig(format!(
                        "embed_dim {} not divisible by num_heads {}",
                        self.embed_dim, self.num_heads
                    )));
                }
            }
            BackboneKind::Pooled => {}
        }
        Ok(())
    }

    /// Patches per axis.
    pub fn patch_grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Patch tokens plus the classification token.
    pub fn token_count(&self) -> usize {
        self.patch_grid() * self.patch_grid() + 1
    }

    /// Closed-form parameter count of backbone plus head.
    pub fn parameter_count(&self, head: &HeadConfig) -> u64 {
        let e = self.embed_dim as u64;
        let p = self.patch_side as u64;
        let head_params =
            (head.hidden_dim * head.in_dim + head.hidden_dim + head.hidden_dim + 1) as u64;
        let patch_embed = e * 3 * p * p + e;
        match self.kind {
            BackboneKind::Vit => {
                let s = self.token_count() as u64;
                let r = MLP_RATIO as u64;
                let per_block = 2 * e                // norm1
                    + 3 * e * e + 3 * e              // qkv
                    + e * e + e                      // proj
                    + 2 * e                          // norm2
                    + r * e * e + r * e              // fc1
                    + r * e * e + e; // fc2
                patch_embed + e + s * e + self.depth as u64 * per_block + 2 * e + head_params
            }
            BackboneKind::Pooled => patch_embed + 2 * e + head_params,
        }
    }
}

/// Two affine layers with a GELU between them, producing one scalar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl HeadConfig {
    pub fn for_backbone(cfg: &BackboneConfig) -> Self {
        Self {
            in_dim: cfg.embed_dim,
            hidden_dim: 512,
        }
    }
}

/// The scalar stage score produced by the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageScore(f64);

impl StageScore {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("stage score {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One block's post-softmax attention and the gradient of the model output
/// with respect to it, both `heads x s x s`.
#[derive(Debug, Clone)]
pub struct TraceBlock {
    pub attention: Array3<f64>,
    pub grad: Array3<f64>,
}

/// Per-block attention tensors captured during a traced forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub blocks: Vec<TraceBlock>,
}

impl AttentionTrace {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_count(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.attention.dim().0)
    }

    pub fn token_count(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.attention.dim().1)
    }

    /// Shape consistency plus row-stochasticity of every attention head.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("empty attention trace".into()));
        }
        let dim = self.blocks[0].attention.dim();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.attention.dim() != dim || b.grad.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "trace block {i} has inconsistent shape"
                )));
            }
            for h in 0..dim.0 {
                let a = b.attention.index_axis(ndarray::Axis(0), h);
                for row in a.rows() {
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > 1e-5 {
                        return Err(Error::InvalidArgument(format!(
                            "attention row sums to {sum} in block {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ArchIds {
    Vit(VitIds),
    Pooled(PooledIds),
}

/// A backbone plus regression head with all parameters in one flat store.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: BackboneConfig,
    head_cfg: HeadConfig,
    params: ParamStore,
    arch: ArchIds,
    head_ids: HeadIds,
}

impl Model {
    /// Build a model: validate configs, register and initialize parameters
    /// (truncated-normal weights, zero biases, unit norm gains), then load
    /// pretrained backbone weights when a descriptor is configured. The head
    /// is always freshly initialized and no layer is frozen.
    pub fn build(cfg: BackboneConfig, head_cfg: HeadConfig, init_seed: u64) -> Result<Self> {
        Self::build_inner(cfg, head_cfg, init_seed, true)
    }

    /// Architecture shell for checkpoint loading: every tensor will be
    /// overwritten, so skip the pretrained descriptor.
    pub(crate) fn build_skeleton(cfg: BackboneConfig, head_cfg: HeadConfig) -> Result<Self> {
        Self::build_inner(cfg, head_cfg, 0, false)
    }

    fn build_inner(
        cfg: BackboneConfig,
        head_cfg: HeadConfig,
        init_seed: u64,
        load_pretrained: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if head_cfg.in_dim != cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "head in_dim {} does not match backbone embed_dim {}",
                head_cfg.in_dim, cfg.embed_dim
            )));
        }
        if head_cfg.hidden_dim == 0 {
            return Err(Error::InvalidConfig("head hidden_dim must be positive".into()));
        }
        let mut params = ParamStore::new();
        let arch = match cfg.kind {
            BackboneKind::Vit => ArchIds::Vit(vit::register_vit(&mut params, &cfg)),
            BackboneKind::Pooled => ArchIds::Pooled(pooled::register_pooled(&mut params, &cfg)),
        };
        let head_ids = vit::register_head(&mut params, &head_cfg);

        let mut rng = rng::substream(init_seed, "init");
        for i in 0..params.defs().len() {
            let def = params.defs()[i].clone();
            let values = params.slice_mut(i);
            if def.name.ends_with(".bias") {
                values.fill(0.0);
            } else if def.name.contains("norm") && def.name.ends_with(".weight") {
                values.fill(1.0);
            } else {
                for v in values.iter_mut() {
                    *v = rng::truncated_normal(&mut rng, 0.02);
                }
            }
        }

        let mut model = Self {
            cfg,
            head_cfg,
            params,
            arch,
            head_ids,
        };
        if load_pretrained {
            if let Some(descriptor) = model.cfg.pretrained_source.clone() {
                checkpoint::apply_pretrained(&mut model, std::path::Path::new(&descriptor))?;
            }
        }
        Ok(model)
    }

    /// The live backbone configuration.
    pub fn describe_backbone(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_cfg
    }

    pub fn normalization(&self) -> &ChannelStats {
        &self.cfg.normalization
    }

    /// Number of trainable parameters actually materialized.
    pub fn parameter_count(&self) -> usize {
        self.params.total_len()
    }

    pub fn supports_attention_trace(&self) -> bool {
        matches!(self.cfg.kind, BackboneKind::Vit)
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        if input.side != self.cfg.image_side {
            return Err(Error::ShapeMismatch(format!(
                "input side {} does not match model image_side {}",
                input.side, self.cfg.image_side
            )));
        }
        if input.data.len() != 3 * input.side * input.side {
            return Err(Error::ShapeMismatch(format!(
                "input buffer holds {} values, expected {}",
                input.data.len(),
                3 * input.side * input.side
            )));
        }
        Ok(())
    }

    fn vit(&self) -> Option<VitModel<'_>> {
        match &self.arch {
            ArchIds::Vit(ids) => Some(VitModel {
                cfg: &self.cfg,
                ids,
                head_ids: &self.head_ids,
                params: &self.params,
            }),
            ArchIds::Pooled(_) => None,
        }
    }

    fn pooled(&self) -> Option<PooledModel<'_>> {
        match &self.arch {
            ArchIds::Pooled(ids) => Some(PooledModel {
                cfg: &self.cfg,
                ids,
                head_ids: &self.head_ids,
                params: &self.params,
            }),
            ArchIds::Vit(_) => None,
        }
    }

    fn score_of(&self, input: &ModelInput) -> Result<f64> {
        self.check_input(input)?;
        let score = match &self.arch {
            ArchIds::Vit(_) => self.vit().unwrap().forward(input, None)?.score,
            ArchIds::Pooled(_) => self.pooled().unwrap().forward(input).score,
        };
        Ok(score)
    }

    /// Evaluation-mode forward pass over a batch; one finite scalar per item.
    pub fn forward_batch(&self, inputs: &[ModelInput]) -> Result<Vec<StageScore>> {
        inputs
            .iter()
            .map(|i| StageScore::new(self.score_of(i)?))
            .collect()
    }

    /// Forward pass on a single image capturing, for every block, the
    /// post-softmax attention and the gradient of the score with respect to
    /// it.
    pub fn forward_traced(&self, input: &ModelInput) -> Result<(StageScore, AttentionTrace)> {
        let vit = self.vit().ok_or(Error::TraceUnsupported)?;
        self.check_input(input)?;
        let cache = vit.forward(input, None)?;
        let grads = vit.backward(&cache, 1.0, None, true);
        let blocks = cache_attention(&cache, grads);
        let trace = AttentionTrace { blocks };
        Ok((StageScore::new(cache.score)?, trace))
    }

    /// Forward pass with selected blocks' post-softmax attention replaced by
    /// the provided tensors. Supports finite-difference sensitivity checks of
    /// the traced gradients.
    pub fn forward_with_attention_overrides(
        &self,
        input: &ModelInput,
        overrides: &BTreeMap<usize, Array3<f64>>,
    ) -> Result<f64> {
        let vit = self.vit().ok_or(Error::TraceUnsupported)?;
        self.check_input(input)?;
        for &b in overrides.keys() {
            if b >= self.cfg.depth {
                return Err(Error::InvalidArgument(format!(
                    "override for block {b} beyond depth {}",
                    self.cfg.depth
                )));
            }
        }
        Ok(vit.forward(input, Some(overrides))?.score)
    }

    /// Forward plus backward for training: accumulates parameter gradients
    /// scaled by `d_score` into `grads` and returns the raw score.
    pub(crate) fn forward_backward(
        &self,
        input: &ModelInput,
        d_score: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.check_input(input)?;
        debug_assert_eq!(grads.len(), self.params.total_len());
        match &self.arch {
            ArchIds::Vit(_) => {
                let vit = self.vit().unwrap();
                let cache = vit.forward(input, None)?;
                vit.backward(&cache, d_score, Some(grads), false);
                Ok(cache.score)
            }
            ArchIds::Pooled(_) => {
                let pooled = self.pooled().unwrap();
                let cache = pooled.forward(input);
                pooled.backward(&cache, d_score, grads);
                Ok(cache.score)
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

fn cache_attention(cache: &vit::VitCache, grads: Vec<Array3<f64>>) -> Vec<TraceBlock> {
    cache
        .attention_tensors()
        .into_iter()
        .zip(grads)
        .map(|(attention, grad)| TraceBlock { attention, grad })
        .collect()
}

/// Convenience wrapper mirroring the build operation.
pub fn build_model(cfg: BackboneConfig, head: HeadConfig, init_seed: u64) -> Result<Model> {
    Model::build(cfg, head, init_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::ModelInput;

    pub(crate) fn toy_input(seed: u64, side: usize) -> ModelInput {
        let mut rng = rng::substream(seed, "toy-input");
        use rand::Rng;
        ModelInput {
            side,
            data: (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn toy_parameter_count_matches_formula() {
        let cfg = BackboneConfig::toy();
        let head = HeadConfig::for_backbone(&cfg);
        let model = Model::build(cfg.clone(), head.clone(), 0).unwrap();
        assert_eq!(model.parameter_count() as u64, cfg.parameter_count(&head));
        // Hand-computed: patch 6176 + cls 32 + pos 544 + 2 blocks x 12704
        //              + final norm 64 + head 17409 = 49633.
        assert_eq!(model.parameter_count(), 49_633);
    }

    #[test]
    fn vit_base_formula_is_about_86_9_million() {
        let cfg = BackboneConfig::vit_base();
        let head = HeadConfig::for_backbone(&cfg);
        let count = cfg.parameter_count(&head) as f64;
        assert!((count - 86.9e6).abs() / 86.9e6 < 0.01, "count = {count}");
    }

    #[test]
    fn head_in_dim_mismatch_is_rejected() {
        let cfg = BackboneConfig::toy();
        let head = HeadConfig {
            in_dim: cfg.embed_dim + 1,
            hidden_dim: 512,
        };
        assert!(matches!(
            Model::build(cfg, head, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = BackboneConfig::toy();
        let model = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 7).unwrap();
        let input = toy_input(1, cfg.image_side);
        let batch = vec![input.clone(), input.clone()];
        let scores = model.forward_batch(&batch).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].value(), scores[1].value());

        let rebuilt = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 7).unwrap();
        let again = rebuilt.forward_batch(&[input]).unwrap();
        assert!((scores[0].value() - again[0].value()).abs() < 1e-6);

        let wrong = toy_input(2, cfg.image_side * 2);
        assert!(matches!(
            model.forward_batch(&[wrong]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn traced_forward_matches_plain_forward() {
        let cfg = BackboneConfig::toy();
        let model = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 3).unwrap();
        let input = toy_input(5, cfg.image_side);
        let plain = model.forward_batch(std::slice::from_ref(&input)).unwrap()[0].value();
        let (score, trace) = model.forward_traced(&input).unwrap();
        assert!((plain - score.value()).abs() < 1e-6);
        assert_eq!(trace.depth(), cfg.depth);
        assert_eq!(trace.head_count(), cfg.num_heads);
        assert_eq!(trace.token_count(), cfg.token_count());
        trace.validate().unwrap();
    }

    #[test]
    fn describe_round_trips_config() {
        let cfg = BackboneConfig::toy();
        let model = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 0).unwrap();
        assert_eq!(model.describe_backbone(), &cfg);
        assert_eq!(model.describe_backbone().token_count(), 17);
        assert_eq!(BackboneConfig::vit_base().token_count(), 1370);
    }

    #[test]
    fn pooled_backbone_declines_tracing() {
        let cfg = BackboneConfig {
            kind: BackboneKind::Pooled,
            depth: 0,
            num_heads: 0,
            ..BackboneConfig::toy()
        };
        let model = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 0).unwrap();
        assert!(!model.supports_attention_trace());
        let input = toy_input(4, cfg.image_side);
        assert!(model.forward_batch(std::slice::from_ref(&input)).is_ok());
        assert!(matches!(
            model.forward_traced(&input),
            Err(Error::TraceUnsupported)
        ));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = BackboneConfig::toy();
        let model = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 11).unwrap();
        let (_, trace) = model.forward_traced(&toy_input(6, cfg.image_side)).unwrap();
        for block in &trace.blocks {
            for h in 0..trace.head_count() {
                let a = block.attention.index_axis(ndarray::Axis(0), h);
                for row in a.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-5);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        // Spot-check the full training gradient on a mini config: perturb a
        // sample of parameters and compare against central differences.
        let cfg = BackboneConfig {
            image_side: 16,
            patch_side: 8,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            ..BackboneConfig::toy()
        };
        let head = HeadConfig {
            in_dim: 8,
            hidden_dim: 16,
        };
        let mut model = Model::build(cfg.clone(), head, 13).unwrap();
        let input = toy_input(9, cfg.image_side);

        let mut grads = vec![0.0; model.parameter_count()];
        model.forward_backward(&input, 1.0, &mut grads).unwrap();

        let total = model.parameter_count();
        let eps = 1e-6;
        // Stride through the flat buffer to touch every tensor family.
        let step = (total / 97).max(1);
        for idx in (0..total).step_by(step) {
            let orig = model.params().data()[idx];
            model.params_mut().data_mut()[idx] = orig + eps;
            let plus = model.score_of(&input).unwrap();
            model.params_mut().data_mut()[idx] = orig - eps;
            let minus = model.score_of(&input).unwrap();
            model.params_mut().data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let g = grads[idx];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!(
                (fd - g).abs() / denom < 1e-4,
                "param {idx}: fd={fd} grad={g}"
            );
        }
    }

    #[test]
    fn pooled_gradients_match_finite_differences() {
        let cfg = BackboneConfig {
            image_side: 16,
            patch_side: 8,
            embed_dim: 8,
            depth: 0,
            num_heads: 0,
            kind: BackboneKind::Pooled,
            ..BackboneConfig::toy()
        };
        let head = HeadConfig {
            in_dim: 8,
            hidden_dim: 8,
        };
        let mut model = Model::build(cfg.clone(), head, 5).unwrap();
        let input = toy_input(8, cfg.image_side);
        let mut grads = vec![0.0; model.parameter_count()];
        model.forward_backward(&input, 1.0, &mut grads).unwrap();
        let eps = 1e-6;
        for idx in (0..model.parameter_count()).step_by(13) {
            let orig = model.params().data()[idx];
            model.params_mut().data_mut()[idx] = orig + eps;
            let plus = model.score_of(&input).unwrap();
            model.params_mut().data_mut()[idx] = orig - eps;
            let minus = model.score_of(&input).unwrap();
            model.params_mut().data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let g = grads[idx];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!((fd - g).abs() / denom < 1e-4, "param {idx}: fd={fd} grad={g}");
        }
    }
}
