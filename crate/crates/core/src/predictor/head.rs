//! Retrieval projection, feature assembly and the regression head.

use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{gelu, gelu_grad};
use crate::numerics::tensor::{add_into, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::numerics::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub proj_u: ParamId,
    pub b_u: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadCache {
    r_pre: Vec<f64>,
    r: Vec<f64>,
    features: Vec<f64>,
    hidden_pre: Vec<f64>,
    retrieval_in: Vec<f64>,
}

/// Gradients of the head's inputs.
pub(crate) struct HeadGrads {
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    pub z_aug: Vec<f64>,
    pub c_pop: f64,
}

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore,
        d_u: usize,
        d_m: usize,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b_r = 1.0 / ((d_m + 1) as f64).sqrt();
        let b_u = 1.0 / (d_u as f64).sqrt();
        let b_h = 1.0 / ((6 * width) as f64).sqrt();
        let b_o = 1.0 / (hidden as f64).sqrt();
        PredictionHead {
            w_r: store.add("head.w_r", Tensor::uniform(&[width, d_m + 1], b_r, rng)),
            b_r: store.add("head.b_r", Tensor::uniform(&[width], b_r, rng)),
            proj_u: store.add("head.proj_u", Tensor::uniform(&[width, d_u], b_u, rng)),
            b_u: store.add("head.b_u", Tensor::zeros(&[width])),
            w1: store.add("head.w1", Tensor::uniform(&[hidden, 6 * width], b_h, rng)),
            b1: store.add("head.b1", Tensor::zeros(&[hidden])),
            w2: store.add("head.w2", Tensor::uniform(&[1, hidden], b_o, rng)),
            b2: store.add("head.b2", Tensor::zeros(&[1])),
            width,
        }
    }

    /// `H = [V*; T*; U'; R; V*⊙R; T*⊙R]` and the scalar prediction.
    /// `retrieval` is `None` when the memory pathway is disabled (`R = 0`).
    pub(crate) fn forward_cached(
        &self,
        visual: &[f64],
        text: &[f64],
        meta: &[f64],
        retrieval: Option<(&[f64], f64)>,
        store: &ParamStore,
    ) -> Result<(f64, HeadCache)> {
        let w = self.width;
        let pu = store.value(self.proj_u);
        if visual.len() != w || text.len() != w || meta.len() != pu.cols() {
            return Err(StapError::shape(format!(
                "head inputs: visual {}, text {}, meta {} for width {w}",
                visual.len(),
                text.len(),
                meta.len()
            )));
        }
        let (r_pre, r, retrieval_in) = match retrieval {
            Some((z, c)) => {
                let mut input = z.to_vec();
                input.push(c);
                let wr = store.value(self.w_r);
                if wr.cols() != input.len() {
                    return Err(StapError::shape("retrieval width mismatch"));
                }
                let mut pre = store.value(self.b_r).data().to_vec();
                let mut wz = vec![0.0; w];
                matvec(wr, &input, &mut wz);
                add_into(&mut pre, &wz);
                let r = pre.iter().map(|v| v.max(0.0)).collect();
                (pre, r, input)
            }
            None => (vec![0.0; w], vec![0.0; w], Vec::new()),
        };
        let mut u = store.value(self.b_u).data().to_vec();
        let mut pu_m = vec![0.0; w];
        matvec(pu, meta, &mut pu_m);
        add_into(&mut u, &pu_m);

        let mut features = Vec::with_capacity(6 * w);
        features.extend_from_slice(visual);
        features.extend_from_slice(text);
        features.extend_from_slice(&u);
        features.extend_from_slice(&r);
        features.extend(visual.iter().zip(&r).map(|(a, b)| a * b));
        features.extend(text.iter().zip(&r).map(|(a, b)| a * b));

        let mut hidden_pre = store.value(self.b1).data().to_vec();
        let mut h = vec![0.0; hidden_pre.len()];
        matvec(store.value(self.w1), &features, &mut h);
        add_into(&mut hidden_pre, &h);
        let y = hidden_pre
            .iter()
            .zip(store.value(self.w2).data())
            .map(|(a, w)| w * gelu(*a))
            .sum::<f64>()
            + store.value(self.b2).value();
        Ok((
            y,
            HeadCache {
                r_pre,
                r,
                features,
                hidden_pre,
                retrieval_in,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        meta: &[f64],
        store: &ParamStore,
        cache: &HeadCache,
        grad_y: f64,
        grads: &mut [Tensor],
    ) -> HeadGrads {
        let w = self.width;
        let w2 = store.value(self.w2).data();
        grads[self.b2.index()].data_mut()[0] += grad_y;
        let mut g_hidden = vec![0.0; cache.hidden_pre.len()];
        for (j, a) in cache.hidden_pre.iter().enumerate() {
            grads[self.w2.index()].data_mut()[j] += grad_y * gelu(*a);
            g_hidden[j] = grad_y * w2[j] * gelu_grad(*a);
        }
        add_into(grads[self.b1.index()].data_mut(), &g_hidden);
        outer_acc(&mut grads[self.w1.index()], &g_hidden, &cache.features, 1.0);
        let mut g_feat = vec![0.0; 6 * w];
        matvec_t_acc(store.value(self.w1), &g_hidden, &mut g_feat);

        let f = &cache.features;
        let (vis, txt, r) = (&f[0..w], &f[w..2 * w], &cache.r);
        let mut g_vis = g_feat[0..w].to_vec();
        let mut g_txt = g_feat[w..2 * w].to_vec();
        let g_u = &g_feat[2 * w..3 * w];
        let mut g_r = g_feat[3 * w..4 * w].to_vec();
        for i in 0..w {
            let gvr = g_feat[4 * w + i];
            let gtr = g_feat[5 * w + i];
            g_vis[i] += gvr * r[i];
            g_txt[i] += gtr * r[i];
            g_r[i] += gvr * vis[i] + gtr * txt[i];
        }
        add_into(grads[self.b_u.index()].data_mut(), g_u);
        outer_acc(&mut grads[self.proj_u.index()], g_u, meta, 1.0);

        let mut g_z = Vec::new();
        let mut g_c = 0.0;
        if !cache.retrieval_in.is_empty() {
            let g_pre: Vec<f64> = g_r
                .iter()
                .zip(&cache.r_pre)
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            add_into(grads[self.b_r.index()].data_mut(), &g_pre);
            outer_acc(
                &mut grads[self.w_r.index()],
                &g_pre,
                &cache.retrieval_in,
                1.0,
            );
            let mut g_in = vec![0.0; cache.retrieval_in.len()];
            matvec_t_acc(store.value(self.w_r), &g_pre, &mut g_in);
            g_c = g_in.pop().unwrap();
            g_z = g_in;
        }
        HeadGrads {
            visual: g_vis,
            text: g_txt,
            z_aug: g_z,
            c_pop: g_c,
        }
    }
}
