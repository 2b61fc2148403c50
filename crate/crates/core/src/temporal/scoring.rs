//! Frame scoring MLP over inter-frame deltas and the shared global anchor.

use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{
    gelu, gelu_grad, layer_norm_backward_slice, layer_norm_slice, sigmoid, LayerNormCache, DIV_EPS,
    LN_EPS,
};
use crate::numerics::tensor::{add_into, dot, matvec, outer_acc, Tensor};
use crate::numerics::{ParamId, ParamStore};
use crate::temporal::FrameSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScoreOutput {
    /// Pre-sigmoid scores `u_t`.
    pub pre_scores: Vec<f64>,
    /// Importance weights `w_t = sigmoid(u_t)`.
    pub weights: Vec<f64>,
    pub anchor: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FrameScorer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    /// When false every frame gets weight `sigmoid(0)` and the MLP is bypassed.
    pub learned: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct ScoreCache {
    deltas: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    weight_sum: f64,
    ln: LayerNormCache,
}

impl FrameScorer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_v: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b_in = 1.0 / (d_v as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        FrameScorer {
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::uniform(&[hidden, d_v], b_in, rng),
            ),
            b1: store.add(
                format!("{prefix}.b1"),
                Tensor::uniform(&[hidden], b_in, rng),
            ),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::uniform(&[1, hidden], b_hid, rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::uniform(&[1], b_hid, rng)),
            ln_gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::filled(&[d_v], 1.0)),
            ln_beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros(&[d_v])),
            learned: true,
        }
    }

    pub(crate) fn forward(
        &self,
        seq: &FrameSequence,
        store: &ParamStore,
    ) -> Result<(FrameScoreOutput, ScoreCache)> {
        let (t_len, d_v) = (seq.len(), seq.dim());
        let w1 = store.value(self.w1);
        if w1.cols() != d_v {
            return Err(StapError::shape(format!(
                "frame scorer expects {} features per frame, sequence has {d_v}",
                w1.cols()
            )));
        }
        let hidden = w1.rows();
        let b1 = store.value(self.b1).data();
        let w2 = store.value(self.w2).data();
        let b2 = store.value(self.b2).value();

        let mut deltas = Vec::with_capacity(t_len);
        let mut pre = Vec::with_capacity(t_len);
        let mut u = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let dx: Vec<f64> = if t == 0 {
                vec![0.0; d_v]
            } else {
                seq.frame(t)
                    .iter()
                    .zip(seq.frame(t - 1))
                    .map(|(a, b)| a - b)
                    .collect()
            };
            if self.learned {
                let mut a = vec![0.0; hidden];
                matvec(w1, &dx, &mut a);
                add_into(&mut a, b1);
                let score = a.iter().zip(w2).map(|(ai, wi)| wi * gelu(*ai)).sum::<f64>() + b2;
                u.push(score);
                pre.push(a);
            } else {
                u.push(0.0);
            }
            deltas.push(dx);
        }
        let weights: Vec<f64> = u.iter().map(|&v| sigmoid(v)).collect();

        let weight_sum: f64 = weights.iter().sum();
        let mut pooled = vec![0.0; d_v];
        for (t, w) in weights.iter().enumerate() {
            for (p, x) in pooled.iter_mut().zip(seq.frame(t)) {
                *p += w * x;
            }
        }
        let denom = weight_sum + DIV_EPS;
        pooled.iter_mut().for_each(|p| *p /= denom);
        let (normed, ln) = layer_norm_slice(
            &pooled,
            store.value(self.ln_gamma).data(),
            store.value(self.ln_beta).data(),
            LN_EPS,
        );
        let anchor = normed.iter().map(|v| v.tanh()).collect();
        Ok((
            FrameScoreOutput {
                pre_scores: u,
                weights,
                anchor,
            },
            ScoreCache {
                deltas,
                pre,
                pooled,
                weight_sum,
                ln,
            },
        ))
    }

    /// Accumulates parameter gradients given upstream gradients of the
    /// weights and the anchor.
    pub(crate) fn backward(
        &self,
        seq: &FrameSequence,
        store: &ParamStore,
        out: &FrameScoreOutput,
        cache: &ScoreCache,
        grad_weights: &[f64],
        grad_anchor: &[f64],
        grads: &mut [Tensor],
    ) {
        let d_v = seq.dim();
        let gamma = store.value(self.ln_gamma).data();
        let gn: Vec<f64> = grad_anchor
            .iter()
            .zip(&out.anchor)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let (gpooled, ggamma, gbeta) = layer_norm_backward_slice(&cache.ln, gamma, &gn);
        add_into(grads[self.ln_gamma.index()].data_mut(), &ggamma);
        add_into(grads[self.ln_beta.index()].data_mut(), &gbeta);

        if !self.learned {
            return;
        }
        let denom = cache.weight_sum + DIV_EPS;
        let w2 = store.value(self.w2).data().to_vec();
        let w1 = store.value(self.w1);
        let hidden = w1.rows();
        let mut g_w1 = std::mem::replace(&mut grads[self.w1.index()], Tensor::scalar(0.0));
        let mut g_w2 = vec![0.0; hidden];
        let mut g_b1 = vec![0.0; hidden];
        let mut g_b2 = 0.0;
        let mut centered = vec![0.0; d_v];
        for t in 0..seq.len() {
            for ((c, x), p) in centered.iter_mut().zip(seq.frame(t)).zip(&cache.pooled) {
                *c = x - p;
            }
            let gw = grad_weights[t] + dot(&gpooled, &centered) / denom;
            let w = out.weights[t];
            let gu = gw * w * (1.0 - w);
            if gu == 0.0 {
                continue;
            }
            g_b2 += gu;
            let pre = &cache.pre[t];
            let mut gpre = vec![0.0; hidden];
            for j in 0..hidden {
                g_w2[j] += gu * gelu(pre[j]);
                gpre[j] = gu * w2[j] * gelu_grad(pre[j]);
            }
            add_into(&mut g_b1, &gpre);
            outer_acc(&mut g_w1, &gpre, &cache.deltas[t], 1.0);
        }
        grads[self.w1.index()] = g_w1;
        add_into(grads[self.w2.index()].data_mut(), &g_w2);
        add_into(grads[self.b1.index()].data_mut(), &g_b1);
        grads[self.b2.index()].data_mut()[0] += g_b2;
    }
}

/// Frame importance weights and global anchor for `seq`.
pub fn score_frames(
    seq: &FrameSequence,
    scorer: &FrameScorer,
    store: &ParamStore,
) -> Result<FrameScoreOutput> {
    scorer.forward(seq, store).map(|(o, _)| o)
}
