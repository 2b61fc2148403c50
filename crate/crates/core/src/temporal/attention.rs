//! Single-head attention restricted to a content-adaptive window per frame.

use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{l2_norm, softmax_logit_grad, softmax_slice};
use crate::numerics::tensor::{dot, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::numerics::{ParamId, ParamStore};
use crate::temporal::FrameSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAttnConfig {
    pub d_a: usize,
    /// Base half-window in frames.
    pub window_base: f64,
    /// Window growth in frames per unit of frame norm.
    pub window_beta: f64,
}

impl Default for SparseAttnConfig {
    fn default() -> Self {
        SparseAttnConfig {
            d_a: 16,
            window_base: 4.0,
            window_beta: 0.25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SparseAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub cfg: SparseAttnConfig,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per frame: first key index and attention weights over the window.
    weights: Vec<(usize, Vec<f64>)>,
    ctx: Vec<Vec<f64>>,
}

/// `clamp(round(base + beta * ||x||), 1, T)`, halves rounded away from zero.
pub fn window_size(base: f64, beta: f64, frame_norm: f64, t_len: usize) -> usize {
    let w = (base + beta * frame_norm).round();
    if w.is_nan() || w < 1.0 {
        1
    } else {
        (w as usize).min(t_len)
    }
}

impl SparseAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_v: usize,
        cfg: SparseAttnConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d_a = cfg.d_a;
        let bv = 1.0 / (d_v as f64).sqrt();
        let ba = 1.0 / (d_a as f64).sqrt();
        SparseAttention {
            wq: store.add(
                format!("{prefix}.wq"),
                Tensor::uniform(&[d_a, d_v], bv, rng),
            ),
            wk: store.add(
                format!("{prefix}.wk"),
                Tensor::uniform(&[d_a, d_v], bv, rng),
            ),
            wv: store.add(
                format!("{prefix}.wv"),
                Tensor::uniform(&[d_a, d_v], bv, rng),
            ),
            wo: store.add(
                format!("{prefix}.wo"),
                Tensor::uniform(&[d_v, d_a], ba, rng),
            ),
            cfg,
        }
    }

    pub fn windows(&self, seq: &FrameSequence) -> Vec<usize> {
        (0..seq.len())
            .map(|t| {
                window_size(
                    self.cfg.window_base,
                    self.cfg.window_beta,
                    l2_norm(seq.frame(t)),
                    seq.len(),
                )
            })
            .collect()
    }

    pub(crate) fn forward_with_windows(
        &self,
        seq: &FrameSequence,
        windows: &[usize],
        store: &ParamStore,
    ) -> Result<(Tensor, AttnCache)> {
        let (t_len, d_v) = (seq.len(), seq.dim());
        let (wq, wk, wv, wo) = (
            store.value(self.wq),
            store.value(self.wk),
            store.value(self.wv),
            store.value(self.wo),
        );
        let d_a = wq.rows();
        if wq.cols() != d_v || wo.shape() != [d_v, d_a] {
            return Err(StapError::shape(format!(
                "attention projections do not match d_v={d_v}"
            )));
        }
        let project = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..t_len)
                .map(|t| {
                    let mut o = vec![0.0; d_a];
                    matvec(w, seq.frame(t), &mut o);
                    o
                })
                .collect()
        };
        let (q, k, v) = (project(wq), project(wk), project(wv));
        let scale = 1.0 / (d_a as f64).sqrt();
        let mut y = Tensor::zeros(&[t_len, d_v]);
        let mut weights = Vec::with_capacity(t_len);
        let mut ctx = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let lo = t.saturating_sub(windows[t]);
            let hi = (t + windows[t]).min(t_len - 1);
            let scores: Vec<f64> = (lo..=hi).map(|j| dot(&q[t], &k[j]) * scale).collect();
            let a = softmax_slice(&scores, 1.0);
            let mut c = vec![0.0; d_a];
            for (aj, vj) in a.iter().zip(&v[lo..=hi]) {
                for (ci, vi) in c.iter_mut().zip(vj) {
                    *ci += aj * vi;
                }
            }
            matvec(wo, &c, y.row_mut(t));
            weights.push((lo, a));
            ctx.push(c);
        }
        Ok((
            y,
            AttnCache {
                q,
                k,
                v,
                weights,
                ctx,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        seq: &FrameSequence,
        store: &ParamStore,
        cache: &AttnCache,
        grad_y: &Tensor,
        grads: &mut [Tensor],
    ) {
        let t_len = seq.len();
        let wo = store.value(self.wo);
        let d_a = wo.cols();
        let scale = 1.0 / (d_a as f64).sqrt();
        let mut gq = vec![vec![0.0; d_a]; t_len];
        let mut gk = vec![vec![0.0; d_a]; t_len];
        let mut gv = vec![vec![0.0; d_a]; t_len];
        {
            let g_wo = &mut grads[self.wo.index()];
            for t in 0..t_len {
                outer_acc(g_wo, grad_y.row(t), &cache.ctx[t], 1.0);
            }
        }
        for t in 0..t_len {
            let mut gc = vec![0.0; d_a];
            matvec_t_acc(wo, grad_y.row(t), &mut gc);
            let (lo, a) = &cache.weights[t];
            let ga: Vec<f64> = (0..a.len()).map(|i| dot(&gc, &cache.v[lo + i])).collect();
            for (i, ai) in a.iter().enumerate() {
                for (g, c) in gv[lo + i].iter_mut().zip(&gc) {
                    *g += ai * c;
                }
            }
            let gs = softmax_logit_grad(a, &ga);
            for (i, g) in gs.iter().enumerate() {
                let g = g * scale;
                let j = lo + i;
                for d in 0..d_a {
                    gq[t][d] += g * cache.k[j][d];
                    gk[j][d] += g * cache.q[t][d];
                }
            }
        }
        for (id, g) in [(self.wq, &gq), (self.wk, &gk), (self.wv, &gv)] {
            let gw = &mut grads[id.index()];
            for t in 0..t_len {
                outer_acc(gw, &g[t], seq.frame(t), 1.0);
            }
        }
    }
}

/// Windowed attention with per-frame adaptive half-windows.
pub fn sparse_attention(
    seq: &FrameSequence,
    block: &SparseAttention,
    store: &ParamStore,
) -> Result<Tensor> {
    let windows = block.windows(seq);
    block
        .forward_with_windows(seq, &windows, store)
        .map(|(y, _)| y)
}

/// Full quadratic attention with the same projections.
pub fn dense_attention(
    seq: &FrameSequence,
    block: &SparseAttention,
    store: &ParamStore,
) -> Result<Tensor> {
    let windows = vec![seq.len(); seq.len()];
    block
        .forward_with_windows(seq, &windows, store)
        .map(|(y, _)| y)
}
