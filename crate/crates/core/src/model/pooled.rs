//! Patch-pooling baseline backbone: patch embedding, mean pooling over
//! patches, layer norm. A minimal non-transformer backbone that exercises
//! the pluggable-backbone surface; it cannot produce attention traces.

use ndarray::{Array1, Array2};

use super::params::ParamStore;
use super::vit::{extract_patches, gelu, gelu_grad, LN_EPS};
use super::BackboneConfig;
use crate::preprocess::ModelInput;

#[derive(Debug, Clone)]
pub(crate) struct PooledIds {
    pub patch_w: usize,
    pub patch_b: usize,
    pub norm_w: usize,
    pub norm_b: usize,
}

pub(crate) fn register_pooled(store: &mut ParamStore, cfg: &BackboneConfig) -> PooledIds {
    let e = cfg.embed_dim;
    let p = cfg.patch_side;
    PooledIds {
        patch_w: store.register("patch_embed.weight", &[e, 3 * p * p]),
        patch_b: store.register("patch_embed.bias", &[e]),
        norm_w: store.register("norm.weight", &[e]),
        norm_b: store.register("norm.bias", &[e]),
    }
}

pub(crate) struct PooledCache {
    patches: Array2<f64>,
    xhat: Array1<f64>,
    rstd: f64,
    emb: Array1<f64>,
    h1: Array1<f64>,
    g1: Array1<f64>,
    pub score: f64,
}

pub(crate) struct PooledModel<'a> {
    pub cfg: &'a BackboneConfig,
    pub ids: &'a PooledIds,
    pub head_ids: &'a super::vit::HeadIds,
    pub params: &'a ParamStore,
}

impl<'a> PooledModel<'a> {
    pub fn forward(&self, input: &ModelInput) -> PooledCache {
        let p = self.params;
        let e = self.cfg.embed_dim;
        let patches = extract_patches(input, self.cfg.patch_side);
        let n = patches.nrows() as f64;
        let embedded = patches.dot(&p.view2(self.ids.patch_w).t());
        let mut pooled = Array1::zeros(e);
        for row in embedded.rows() {
            pooled += &row;
        }
        pooled /= n;
        pooled += &p.view1(self.ids.patch_b);

        let mu = pooled.sum() / e as f64;
        let var = pooled.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / e as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let xhat = pooled.mapv(|v| (v - mu) * rstd);
        let gamma = p.view1(self.ids.norm_w);
        let beta = p.view1(self.ids.norm_b);
        let emb: Array1<f64> = ndarray::Zip::from(&xhat)
            .and(gamma)
            .and(beta)
            .map_collect(|&h, &g, &b| g * h + b);

        let h1 = p.view2(self.head_ids.fc1_w).dot(&emb) + p.view1(self.head_ids.fc1_b);
        let g1 = h1.mapv(gelu);
        let score = p.view2(self.head_ids.fc2_w).row(0).dot(&g1) + p.view1(self.head_ids.fc2_b)[0];

        PooledCache {
            patches,
            xhat,
            rstd,
            emb,
            h1,
            g1,
            score,
        }
    }

    pub fn backward(&self, cache: &PooledCache, d_score: f64, grads: &mut [f64]) {
        let p = self.params;
        let e = self.cfg.embed_dim;

        // Head.
        let dg1 = p.view2(self.head_ids.fc2_w).row(0).to_owned() * d_score;
        let dh1: Array1<f64> = ndarray::Zip::from(&dg1)
            .and(&cache.h1)
            .map_collect(|&dg, &h| dg * gelu_grad(h));
        let demb = p.view2(self.head_ids.fc1_w).t().dot(&dh1);
        {
            let mut dw2 = p.grad_view2(grads, self.head_ids.fc2_w);
            for (i, v) in cache.g1.iter().enumerate() {
                dw2[(0, i)] += d_score * v;
            }
        }
        p.grad_view1(grads, self.head_ids.fc2_b)[0] += d_score;
        {
            let mut dw1 = p.grad_view2(grads, self.head_ids.fc1_w);
            for r in 0..dh1.len() {
                for c in 0..e {
                    dw1[(r, c)] += dh1[r] * cache.emb[c];
                }
            }
        }
        {
            let mut db1 = p.grad_view1(grads, self.head_ids.fc1_b);
            for r in 0..dh1.len() {
                db1[r] += dh1[r];
            }
        }

        // Layer norm (single row).
        let gamma = p.view1(self.ids.norm_w);
        let mut mean_dg = 0.0;
        let mut mean_dg_xhat = 0.0;
        for c in 0..e {
            let dg = demb[c] * gamma[c];
            mean_dg += dg;
            mean_dg_xhat += dg * cache.xhat[c];
        }
        mean_dg /= e as f64;
        mean_dg_xhat /= e as f64;
        let mut dpooled = Array1::zeros(e);
        for c in 0..e {
            let dg = demb[c] * gamma[c];
            dpooled[c] = cache.rstd * (dg - mean_dg - cache.xhat[c] * mean_dg_xhat);
        }
        {
            let mut dgamma = p.grad_view1(grads, self.ids.norm_w);
            for c in 0..e {
                dgamma[c] += demb[c] * cache.xhat[c];
            }
        }
        {
            let mut dbeta = p.grad_view1(grads, self.ids.norm_b);
            for c in 0..e {
                dbeta[c] += demb[c];
            }
        }

        // Mean pooling and patch embedding.
        let n = cache.patches.nrows() as f64;
        {
            let mut db = p.grad_view1(grads, self.ids.patch_b);
            db += &dpooled;
        }
        let mut dw = p.grad_view2(grads, self.ids.patch_w);
        for row in cache.patches.rows() {
            for (r, &dp) in dpooled.iter().enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    dw[(r, c)] += dp / n * x;
                }
            }
        }
    }
}
