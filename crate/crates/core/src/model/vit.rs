//! Vision-transformer backbone with explicit forward and backward passes.
//!
//! The backward pass is written out by hand so the gradient of the scalar
//! output with respect to each block's post-softmax attention matrix can be
//! captured exactly, which is what the rollout explainability consumes. The
//! same pass accumulates parameter gradients for fine-tuning.

use ndarray::{s, Array1, Array2, Array3};
use std::collections::BTreeMap;

use super::params::ParamStore;
use super::{BackboneConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::preprocess::ModelInput;

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const MLP_RATIO: usize = 4;

/// Exact GELU: x * Phi(x).
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx of the exact GELU: Phi(x) + x * phi(x).
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct VitIds {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIds>,
    pub norm_w: usize,
    pub norm_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadIds {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

pub(crate) fn register_vit(store: &mut ParamStore, cfg: &BackboneConfig) -> VitIds {
    let e = cfg.embed_dim;
    let p = cfg.patch_side;
    let s = cfg.token_count();
    let patch_w = store.register("patch_embed.weight", &[e, 3 * p * p]);
    let patch_b = store.register("patch_embed.bias", &[e]);
    let cls = store.register("cls_token", &[e]);
    let pos = store.register("pos_embed", &[s, e]);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for b in 0..cfg.depth {
        let pfx = format!("blocks.{b}");
        blocks.push(BlockIds {
            ln1_w: store.register(&format!("{pfx}.norm1.weight"), &[e]),
            ln1_b: store.register(&format!("{pfx}.norm1.bias"), &[e]),
            qkv_w: store.register(&format!("{pfx}.attn.qkv.weight"), &[3 * e, e]),
            qkv_b: store.register(&format!("{pfx}.attn.qkv.bias"), &[3 * e]),
            proj_w: store.register(&format!("{pfx}.attn.proj.weight"), &[e, e]),
            proj_b: store.register(&format!("{pfx}.attn.proj.bias"), &[e]),
            ln2_w: store.register(&format!("{pfx}.norm2.weight"), &[e]),
            ln2_b: store.register(&format!("{pfx}.norm2.bias"), &[e]),
            fc1_w: store.register(&format!("{pfx}.mlp.fc1.weight"), &[MLP_RATIO * e, e]),
            fc1_b: store.register(&format!("{pfx}.mlp.fc1.bias"), &[MLP_RATIO * e]),
            fc2_w: store.register(&format!("{pfx}.mlp.fc2.weight"), &[e, MLP_RATIO * e]),
            fc2_b: store.register(&format!("{pfx}.mlp.fc2.bias"), &[e]),
        });
    }
    let norm_w = store.register("norm.weight", &[e]);
    let norm_b = store.register("norm.bias", &[e]);
    VitIds {
        patch_w,
        patch_b,
        cls,
        pos,
        blocks,
        norm_w,
        norm_b,
    }
}

pub(crate) fn register_head(store: &mut ParamStore, head: &HeadConfig) -> HeadIds {
    HeadIds {
        fc1_w: store.register("head.fc1.weight", &[head.hidden_dim, head.in_dim]),
        fc1_b: store.register("head.fc1.bias", &[head.hidden_dim]),
        fc2_w: store.register("head.fc2.weight", &[1, head.hidden_dim]),
        fc2_b: store.register("head.fc2.bias", &[1]),
    }
}

/// Flatten an image into per-patch rows, channel-major within each patch.
pub(crate) fn extract_patches(input: &ModelInput, patch: usize) -> Array2<f64> {
    let n = input.side;
    let grid = n / patch;
    let mut out = Array2::zeros((grid * grid, 3 * patch * patch));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        let col = c * patch * patch + py * patch + px;
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[(row, col)] = input.data[c * n * n + y * n + x];
                    }
                }
            }
        }
    }
    out
}

/// y = x W^T + b
fn linear(x: &Array2<f64>, w: ndarray::ArrayView2<f64>, b: ndarray::ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        row += &b;
    }
    y
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: ndarray::ArrayView1<f64>, beta: ndarray::ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut rstd = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mu = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (x[(r, c)] - mu) * rs;
            xhat[(r, c)] = h;
            y[(r, c)] = gamma[c] * h + beta[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// dL/dx of layer norm; accumulates dgamma/dbeta.
fn layer_norm_backward(
    cache: &LnCache,
    gamma: ndarray::ArrayView1<f64>,
    dy: &Array2<f64>,
    dgamma: &mut ndarray::ArrayViewMut1<f64>,
    dbeta: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    let (rows, cols) = dy.dim();
    let mut dx = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut mean_dg = 0.0;
        let mut mean_dg_xhat = 0.0;
        for c in 0..cols {
            let dg = dy[(r, c)] * gamma[c];
            mean_dg += dg;
            mean_dg_xhat += dg * cache.xhat[(r, c)];
            dgamma[c] += dy[(r, c)] * cache.xhat[(r, c)];
            dbeta[c] += dy[(r, c)];
        }
        mean_dg /= cols as f64;
        mean_dg_xhat /= cols as f64;
        for c in 0..cols {
            let dg = dy[(r, c)] * gamma[c];
            dx[(r, c)] = cache.rstd[r] * (dg - mean_dg - cache.xhat[(r, c)] * mean_dg_xhat);
        }
    }
    dx
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// dL/dlogits given the softmax output and dL/dsoftmax, row-wise.
fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = a.dim();
    let mut dl = Array2::zeros((rows, cols));
    for r in 0..rows {
        let dot: f64 = (0..cols).map(|c| da[(r, c)] * a[(r, c)]).sum();
        for c in 0..cols {
            dl[(r, c)] = a[(r, c)] * (da[(r, c)] - dot);
        }
    }
    dl
}

struct BlockCache {
    ln1: LnCache,
    y: Array2<f64>,
    qkv: Array2<f64>,
    attn: Vec<Array2<f64>>, // per head, s x s
    ctx: Array2<f64>,       // concatenated heads, s x e
    ln2: LnCache,
    z: Array2<f64>,
    m1: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) struct VitCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    cls_emb: Array1<f64>,
    h1: Array1<f64>,
    g1: Array1<f64>,
    pub score: f64,
}

impl VitCache {
    /// Per-block attention stacked as `heads x s x s`.
    pub(crate) fn attention_tensors(&self) -> Vec<Array3<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let heads = b.attn.len();
                let tokens = b.attn[0].nrows();
                let mut t = Array3::zeros((heads, tokens, tokens));
                for (h, a) in b.attn.iter().enumerate() {
                    t.index_axis_mut(ndarray::Axis(0), h).assign(a);
                }
                t
            })
            .collect()
    }
}

pub(crate) struct VitModel<'a> {
    pub cfg: &'a BackboneConfig,
    pub ids: &'a VitIds,
    pub head_ids: &'a HeadIds,
    pub params: &'a ParamStore,
}

impl<'a> VitModel<'a> {
    /// Forward pass. `overrides` substitutes post-softmax attention tensors
    /// (`block -> heads x s x s`) so sensitivity checks can perturb attention
    /// as an independent input. `capture` keeps per-block attention for the
    /// trace.
    pub fn forward(
        &self,
        input: &ModelInput,
        overrides: Option<&BTreeMap<usize, Array3<f64>>>,
    ) -> Result<VitCache> {
        let cfg = self.cfg;
        let e = cfg.embed_dim;
        let heads = cfg.num_heads;
        let dh = e / heads;
        let tokens = cfg.token_count();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = self.params;

        let patches = extract_patches(input, cfg.patch_side);
        let embedded = linear(&patches, p.view2(self.ids.patch_w), p.view1(self.ids.patch_b));
        let mut x = Array2::zeros((tokens, e));
        x.row_mut(0).assign(&p.view1(self.ids.cls));
        x.slice_mut(s![1.., ..]).assign(&embedded);
        x += &p.view2(self.ids.pos);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for (b, ids) in self.ids.blocks.iter().enumerate() {
            let x_in = x.clone();
            let (y, ln1) = layer_norm(&x_in, p.view1(ids.ln1_w), p.view1(ids.ln1_b));
            let qkv = linear(&y, p.view2(ids.qkv_w), p.view1(ids.qkv_b));

            let mut ctx = Array2::zeros((tokens, e));
            let mut attn = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., e + h * dh..e + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh]);
                let a = match overrides.and_then(|o| o.get(&b)) {
                    Some(t) => {
                        if t.dim() != (heads, tokens, tokens) {
                            return Err(Error::ShapeMismatch(format!(
                                "attention override for block {b} has shape {:?}, expected ({heads}, {tokens}, {tokens})",
                                t.dim()
                            )));
                        }
                        t.index_axis(ndarray::Axis(0), h).to_owned()
                    }
                    None => {
                        let logits = q.dot(&k.t()) * scale;
                        softmax_rows(&logits)
                    }
                };
                ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
                attn.push(a);
            }
            let o = linear(&ctx, p.view2(ids.proj_w), p.view1(ids.proj_b));
            let x_mid = &x_in + &o;

            let (z, ln2) = layer_norm(&x_mid, p.view1(ids.ln2_w), p.view1(ids.ln2_b));
            let m1 = linear(&z, p.view2(ids.fc1_w), p.view1(ids.fc1_b));
            let g = m1.mapv(gelu);
            let m2 = linear(&g, p.view2(ids.fc2_w), p.view1(ids.fc2_b));
            x = &x_mid + &m2;

            blocks.push(BlockCache {
                ln1,
                y,
                qkv,
                attn,
                ctx,
                ln2,
                z,
                m1,
                g,
            });
        }

        let (feats, final_ln) = layer_norm(&x, p.view1(self.ids.norm_w), p.view1(self.ids.norm_b));
        let cls_emb = feats.row(0).to_owned();

        let w1 = p.view2(self.head_ids.fc1_w);
        let b1 = p.view1(self.head_ids.fc1_b);
        let h1 = w1.dot(&cls_emb) + b1;
        let g1 = h1.mapv(gelu);
        let w2 = p.view2(self.head_ids.fc2_w);
        let score = w2.row(0).dot(&g1) + p.view1(self.head_ids.fc2_b)[0];

        Ok(VitCache {
            patches,
            blocks,
            final_ln,
            cls_emb,
            h1,
            g1,
            score,
        })
    }

    /// Backward pass from `d_score`. Parameter gradients are accumulated into
    /// `grads` when provided; per-block attention gradients are returned when
    /// `capture_attn_grads` is set.
    pub fn backward(
        &self,
        cache: &VitCache,
        d_score: f64,
        mut grads: Option<&mut [f64]>,
        capture_attn_grads: bool,
    ) -> Vec<Array3<f64>> {
        let cfg = self.cfg;
        let e = cfg.embed_dim;
        let heads = cfg.num_heads;
        let dh = e / heads;
        let tokens = cfg.token_count();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = self.params;

        // Head.
        let dg1 = p.view2(self.head_ids.fc2_w).row(0).to_owned() * d_score;
        let dh1: Array1<f64> = ndarray::Zip::from(&dg1)
            .and(&cache.h1)
            .map_collect(|&dg, &h| dg * gelu_grad(h));
        let dcls = p.view2(self.head_ids.fc1_w).t().dot(&dh1);
        if let Some(g) = grads.as_deref_mut() {
            {
                let mut dw2 = p.grad_view2(g, self.head_ids.fc2_w);
                for (i, v) in cache.g1.iter().enumerate() {
                    dw2[(0, i)] += d_score * v;
                }
            }
            p.grad_view1(g, self.head_ids.fc2_b)[0] += d_score;
            {
                let mut dw1 = p.grad_view2(g, self.head_ids.fc1_w);
                for r in 0..dh1.len() {
                    for c in 0..e {
                        dw1[(r, c)] += dh1[r] * cache.cls_emb[c];
                    }
                }
            }
            let mut db1 = p.grad_view1(g, self.head_ids.fc1_b);
            for r in 0..dh1.len() {
                db1[r] += dh1[r];
            }
        }

        // Final layer norm: only the CLS row receives gradient.
        let mut dfeats = Array2::zeros((tokens, e));
        dfeats.row_mut(0).assign(&dcls);
        let mut dx = ln_backward_into(
            p,
            grads.as_deref_mut(),
            self.ids.norm_w,
            self.ids.norm_b,
            &cache.final_ln,
            &dfeats,
        );

        let mut attn_grads: Vec<Array3<f64>> = if capture_attn_grads {
            (0..cfg.depth)
                .map(|_| Array3::zeros((heads, tokens, tokens)))
                .collect()
        } else {
            Vec::new()
        };

        for (b, (ids, bc)) in self.ids.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // MLP branch: x = x_mid + fc2(gelu(fc1(z))).
            let dm2 = dx.clone();
            let dg = dm2.dot(&p.view2(ids.fc2_w));
            let dm1 = ndarray::Zip::from(&dg)
                .and(&bc.m1)
                .map_collect(|&dgv, &m| dgv * gelu_grad(m));
            let dz = dm1.dot(&p.view2(ids.fc1_w));
            if let Some(g) = grads.as_deref_mut() {
                acc_linear(p, g, ids.fc2_w, ids.fc2_b, &bc.g, &dm2);
                acc_linear(p, g, ids.fc1_w, ids.fc1_b, &bc.z, &dm1);
            }
            let dln2_in = ln_backward_into(p, grads.as_deref_mut(), ids.ln2_w, ids.ln2_b, &bc.ln2, &dz);
            let mut dx_mid = dx; // residual path
            dx_mid += &dln2_in;

            // Attention branch: x_mid = x_in + proj(ctx).
            let do_ = dx_mid.clone();
            let dctx = do_.dot(&p.view2(ids.proj_w));
            if let Some(g) = grads.as_deref_mut() {
                acc_linear(p, g, ids.proj_w, ids.proj_b, &bc.ctx, &do_);
            }

            let mut dqkv = Array2::zeros((tokens, 3 * e));
            for h in 0..heads {
                let q = bc.qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = bc.qkv.slice(s![.., e + h * dh..e + (h + 1) * dh]);
                let v = bc.qkv.slice(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh]);
                let a = &bc.attn[h];
                let dctx_h = dctx.slice(s![.., h * dh..(h + 1) * dh]);

                let da = dctx_h.dot(&v.t());
                if capture_attn_grads {
                    attn_grads[b]
                        .index_axis_mut(ndarray::Axis(0), h)
                        .assign(&da);
                }
                let dv = a.t().dot(&dctx_h);
                let dlogits = softmax_backward(a, &da);
                let dq = dlogits.dot(&k) * scale;
                let dk = dlogits.t().dot(&q) * scale;

                dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![.., e + h * dh..e + (h + 1) * dh])
                    .assign(&dk);
                dqkv.slice_mut(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh])
                    .assign(&dv);
            }
            let dy = dqkv.dot(&p.view2(ids.qkv_w));
            if let Some(g) = grads.as_deref_mut() {
                acc_linear(p, g, ids.qkv_w, ids.qkv_b, &bc.y, &dqkv);
            }
            let dln1_in = ln_backward_into(p, grads.as_deref_mut(), ids.ln1_w, ids.ln1_b, &bc.ln1, &dy);
            let mut dx_in = dx_mid; // residual path
            dx_in += &dln1_in;
            dx = dx_in;
        }

        // Token embedding: x0 = [cls; patches W^T + b] + pos.
        if let Some(g) = grads {
            {
                let mut dpos = p.grad_view2(g, self.ids.pos);
                dpos += &dx;
            }
            {
                let mut dcls_tok = p.grad_view1(g, self.ids.cls);
                dcls_tok += &dx.row(0);
            }
            let dpatch_rows = dx.slice(s![1.., ..]).to_owned();
            acc_linear(p, g, self.ids.patch_w, self.ids.patch_b, &cache.patches, &dpatch_rows);
        }

        attn_grads
    }
}

/// Accumulate gradients of y = x W^T + b: dW += dy^T x, db += column sums.
fn acc_linear(
    p: &ParamStore,
    grads: &mut [f64],
    w_id: usize,
    b_id: usize,
    x: &Array2<f64>,
    dy: &Array2<f64>,
) {
    let dw_inc = dy.t().dot(x);
    {
        let mut dw = p.grad_view2(grads, w_id);
        dw += &dw_inc;
    }
    let mut db = p.grad_view1(grads, b_id);
    for row in dy.rows() {
        db += &row;
    }
}

/// Layer-norm backward that accumulates gamma/beta gradients when a gradient
/// buffer is supplied.
fn ln_backward_into(
    p: &ParamStore,
    grads: Option<&mut [f64]>,
    w_id: usize,
    b_id: usize,
    cache: &LnCache,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let gamma = p.view1(w_id);
    match grads {
        Some(g) => {
            let w_def = &p.defs()[w_id];
            let b_def = &p.defs()[b_id];
            debug_assert_eq!(w_def.offset + w_def.len, b_def.offset);
            let (left, right) = g.split_at_mut(b_def.offset);
            let mut dgamma =
                ndarray::ArrayViewMut1::from_shape(w_def.len, &mut left[w_def.offset..]).unwrap();
            let mut dbeta =
                ndarray::ArrayViewMut1::from_shape(b_def.len, &mut right[..b_def.len]).unwrap();
            layer_norm_backward(cache, gamma, dy, &mut dgamma, &mut dbeta)
        }
        None => {
            let cols = dy.dim().1;
            let mut sink_g = Array1::zeros(cols);
            let mut sink_b = Array1::zeros(cols);
            layer_norm_backward(cache, gamma, dy, &mut sink_g.view_mut(), &mut sink_b.view_mut())
        }
    }
}
