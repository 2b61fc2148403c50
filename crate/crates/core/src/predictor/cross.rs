//! Bi-directional cross-attention between visual and text token streams.
//!
//! Each layer updates two pooled state vectors: the text state attends over
//! text tokens with a query taken from the visual state, and the visual state
//! attends over visual tokens with a query from the text state. Both updates
//! are residual and layer-normalized.

use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{
    layer_norm_backward_slice, layer_norm_slice, softmax_logit_grad, softmax_slice, LayerNormCache,
    LN_EPS,
};
use crate::numerics::tensor::{add_into, dot, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::numerics::{ParamId, ParamStore};

#[derive(Clone, Debug)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl AttnParams {
    fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (width as f64).sqrt();
        AttnParams {
            wq: store.add(
                format!("{prefix}.wq"),
                Tensor::uniform(&[width, width], b, rng),
            ),
            wk: store.add(
                format!("{prefix}.wk"),
                Tensor::uniform(&[width, width], b, rng),
            ),
            wv: store.add(
                format!("{prefix}.wv"),
                Tensor::uniform(&[width, width], b, rng),
            ),
            ln_gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::filled(&[width], 1.0)),
            ln_beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros(&[width])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub proj_v: ParamId,
    pub proj_t: ParamId,
    layers: Vec<(AttnParams, AttnParams)>,
    pub width: usize,
}

/// One pooled-query attention step: `LN(state + Wv Σ a_j x_j)`.
#[derive(Clone, Debug)]
struct StepCache {
    query_state: Vec<f64>,
    qv: Vec<f64>,
    r: Vec<f64>,
    weights: Vec<f64>,
    ctx: Vec<f64>,
    ln: LayerNormCache,
}

#[derive(Clone, Debug)]
pub(crate) struct CrossCache {
    vis: Vec<Vec<f64>>,
    txt: Vec<Vec<f64>>,
    /// Per layer: (text update, visual update).
    steps: Vec<(StepCache, StepCache)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossOutput {
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        add_into(&mut m, r);
    }
    let inv = 1.0 / rows.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

fn attend(
    p: &AttnParams,
    store: &ParamStore,
    state: &[f64],
    query_state: &[f64],
    tokens: &[Vec<f64>],
) -> (Vec<f64>, StepCache) {
    let width = state.len();
    let scale = 1.0 / (width as f64).sqrt();
    let qv = {
        let mut o = vec![0.0; width];
        matvec(store.value(p.wq), query_state, &mut o);
        o
    };
    // kᵀq = xᵀ (W_kᵀ q)
    let mut r = vec![0.0; width];
    matvec_t_acc(store.value(p.wk), &qv, &mut r);
    let scores: Vec<f64> = tokens.iter().map(|x| dot(x, &r) * scale).collect();
    let weights = softmax_slice(&scores, 1.0);
    let mut ctx = vec![0.0; width];
    for (a, x) in weights.iter().zip(tokens) {
        for (c, v) in ctx.iter_mut().zip(x) {
            *c += a * v;
        }
    }
    let mut pre = state.to_vec();
    let mut attended = vec![0.0; width];
    matvec(store.value(p.wv), &ctx, &mut attended);
    add_into(&mut pre, &attended);
    let (out, ln) = layer_norm_slice(
        &pre,
        store.value(p.ln_gamma).data(),
        store.value(p.ln_beta).data(),
        LN_EPS,
    );
    (
        out,
        StepCache {
            query_state: query_state.to_vec(),
            qv,
            r,
            weights,
            ctx,
            ln,
        },
    )
}

/// Returns gradients of (state, query state); accumulates token gradients.
fn attend_backward(
    p: &AttnParams,
    store: &ParamStore,
    cache: &StepCache,
    tokens: &[Vec<f64>],
    grad_out: &[f64],
    grad_tokens: &mut [Vec<f64>],
    grads: &mut [Tensor],
) -> (Vec<f64>, Vec<f64>) {
    let width = grad_out.len();
    let scale = 1.0 / (width as f64).sqrt();
    let (g_pre, g_gamma, g_beta) =
        layer_norm_backward_slice(&cache.ln, store.value(p.ln_gamma).data(), grad_out);
    add_into(grads[p.ln_gamma.index()].data_mut(), &g_gamma);
    add_into(grads[p.ln_beta.index()].data_mut(), &g_beta);

    outer_acc(&mut grads[p.wv.index()], &g_pre, &cache.ctx, 1.0);
    let mut g_ctx = vec![0.0; width];
    matvec_t_acc(store.value(p.wv), &g_pre, &mut g_ctx);
    let ga: Vec<f64> = tokens.iter().map(|x| dot(&g_ctx, x)).collect();
    let gs = softmax_logit_grad(&cache.weights, &ga);
    let mut g_r = vec![0.0; width];
    for ((x, gx), (a, g)) in tokens
        .iter()
        .zip(grad_tokens.iter_mut())
        .zip(cache.weights.iter().zip(&gs))
    {
        let g = g * scale;
        for i in 0..width {
            g_r[i] += g * x[i];
            gx[i] += a * g_ctx[i] + g * cache.r[i];
        }
    }
    // r = W_kᵀ qv
    outer_acc(&mut grads[p.wk.index()], &cache.qv, &g_r, 1.0);
    let mut g_qv = vec![0.0; width];
    matvec(store.value(p.wk), &g_r, &mut g_qv);
    outer_acc(&mut grads[p.wq.index()], &g_qv, &cache.query_state, 1.0);
    let mut g_query = vec![0.0; width];
    matvec_t_acc(store.value(p.wq), &g_qv, &mut g_query);
    (g_pre, g_query)
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        d_v: usize,
        d_t: usize,
        width: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let proj_v = store.add(
            "cross.proj_v",
            Tensor::uniform(&[width, d_v], 1.0 / (d_v as f64).sqrt(), rng),
        );
        let proj_t = store.add(
            "cross.proj_t",
            Tensor::uniform(&[width, d_t], 1.0 / (d_t as f64).sqrt(), rng),
        );
        let layers = (0..layers)
            .map(|l| {
                (
                    AttnParams::new(store, &format!("cross.l{l}.text"), width, rng),
                    AttnParams::new(store, &format!("cross.l{l}.visual"), width, rng),
                )
            })
            .collect();
        CrossAttention {
            proj_v,
            proj_t,
            layers,
            width,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn forward_cached(
        &self,
        visual: &Tensor,
        text: &Tensor,
        store: &ParamStore,
    ) -> Result<(CrossOutput, CrossCache)> {
        let pv = store.value(self.proj_v);
        let pt = store.value(self.proj_t);
        if visual.rank() != 2
            || text.rank() != 2
            || visual.cols() != pv.cols()
            || text.cols() != pt.cols()
        {
            return Err(StapError::shape(format!(
                "cross-attention inputs {:?} / {:?} do not match projections",
                visual.shape(),
                text.shape()
            )));
        }
        let vis: Vec<Vec<f64>> = (0..visual.rows())
            .map(|t| {
                let mut o = vec![0.0; self.width];
                matvec(pv, visual.row(t), &mut o);
                o
            })
            .collect();
        let txt: Vec<Vec<f64>> = (0..text.rows())
            .map(|t| {
                let mut o = vec![0.0; self.width];
                matvec(pt, text.row(t), &mut o);
                o
            })
            .collect();
        let mut v_state = mean_rows(&vis);
        let mut t_state = mean_rows(&txt);
        let mut steps = Vec::with_capacity(self.layers.len());
        for (tp, vp) in &self.layers {
            let (t_next, tc) = attend(tp, store, &t_state, &v_state, &txt);
            let (v_next, vc) = attend(vp, store, &v_state, &t_state, &vis);
            t_state = t_next;
            v_state = v_next;
            steps.push((tc, vc));
        }
        Ok((
            CrossOutput {
                visual: v_state,
                text: t_state,
            },
            CrossCache { vis, txt, steps },
        ))
    }

    pub fn forward(
        &self,
        visual: &Tensor,
        text: &Tensor,
        store: &ParamStore,
    ) -> Result<CrossOutput> {
        self.forward_cached(visual, text, store).map(|(o, _)| o)
    }

    /// Accumulates parameter gradients; returns the gradient of the visual
    /// sequence (text tokens are inputs without upstream parameters).
    pub(crate) fn backward(
        &self,
        visual: &Tensor,
        text: &Tensor,
        store: &ParamStore,
        cache: &CrossCache,
        grad_visual: &[f64],
        grad_text: &[f64],
        grads: &mut [Tensor],
    ) -> Tensor {
        let w = self.width;
        let mut g_vis = vec![vec![0.0; w]; cache.vis.len()];
        let mut g_txt = vec![vec![0.0; w]; cache.txt.len()];
        let mut g_v = grad_visual.to_vec();
        let mut g_t = grad_text.to_vec();
        for ((tp, vp), (tc, vc)) in self.layers.iter().zip(&cache.steps).rev() {
            let (gv_state, gt_query) =
                attend_backward(vp, store, vc, &cache.vis, &g_v, &mut g_vis, grads);
            let (gt_state, gv_query) =
                attend_backward(tp, store, tc, &cache.txt, &g_t, &mut g_txt, grads);
            g_v = gv_state;
            add_into(&mut g_v, &gv_query);
            g_t = gt_state;
            add_into(&mut g_t, &gt_query);
        }
        let inv_v = 1.0 / cache.vis.len() as f64;
        for g in g_vis.iter_mut() {
            for (a, b) in g.iter_mut().zip(&g_v) {
                *a += b * inv_v;
            }
        }
        let inv_t = 1.0 / cache.txt.len() as f64;
        for g in g_txt.iter_mut() {
            for (a, b) in g.iter_mut().zip(&g_t) {
                *a += b * inv_t;
            }
        }
        let pv = store.value(self.proj_v);
        let mut g_seq = Tensor::zeros(&[visual.rows(), visual.cols()]);
        for (t, g) in g_vis.iter().enumerate() {
            outer_acc(&mut grads[self.proj_v.index()], g, visual.row(t), 1.0);
            matvec_t_acc(pv, g, g_seq.row_mut(t));
        }
        for (t, g) in g_txt.iter().enumerate() {
            outer_acc(&mut grads[self.proj_t.index()], g, text.row(t), 1.0);
        }
        g_seq
    }
}

/// `(V*, T*)` for a visual sequence and text tokens.
pub fn cross_attention(
    visual: &Tensor,
    text: &Tensor,
    block: &CrossAttention,
    store: &ParamStore,
) -> Result<CrossOutput> {
    block.forward(visual, text, store)
}
