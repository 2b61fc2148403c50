use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{softmax_logit_grad, softmax_slice};
use crate::numerics::tensor::{add_into, dot, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::numerics::{ParamId, ParamStore};
use crate::temporal::FrameSequence;

/// Gate over (SSM, attention, anchor) pathways plus a residual projection.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub wg: ParamId,
    pub bg: ParamId,
    pub wres: ParamId,
    pub bres: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub v_seq: Tensor,
    pub pooled: Vec<f64>,
    /// `(γ_s, γ_a, γ_g)`.
    pub gates: [f64; 3],
}

#[derive(Clone, Debug)]
pub(crate) struct FusionCache {
    gate_input: Vec<f64>,
}

/// Gradients flowing out of the fusion step.
pub(crate) struct FusionGrads {
    pub y_ssm: Tensor,
    pub y_attn: Tensor,
    pub anchor: Vec<f64>,
}

fn column_mean(x: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for t in 0..x.rows() {
        add_into(&mut m, x.row(t));
    }
    let inv = 1.0 / x.rows() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d_v: usize, rng: &mut impl Rng) -> Self {
        let bg = 1.0 / ((3 * d_v) as f64).sqrt();
        let br = 1.0 / (d_v as f64).sqrt();
        GatedFusion {
            wg: store.add(
                format!("{prefix}.wg"),
                Tensor::uniform(&[3, 3 * d_v], bg, rng),
            ),
            bg: store.add(format!("{prefix}.bg"), Tensor::zeros(&[3])),
            wres: store.add(
                format!("{prefix}.wres"),
                Tensor::uniform(&[d_v, d_v], br, rng),
            ),
            bres: store.add(format!("{prefix}.bres"), Tensor::zeros(&[d_v])),
        }
    }

    pub(crate) fn forward(
        &self,
        seq: &FrameSequence,
        y_ssm: &Tensor,
        y_attn: &Tensor,
        anchor: &[f64],
        store: &ParamStore,
    ) -> Result<(FusionOutput, FusionCache)> {
        let (t_len, d_v) = (seq.len(), seq.dim());
        if y_ssm.shape() != [t_len, d_v] || y_attn.shape() != [t_len, d_v] || anchor.len() != d_v {
            return Err(StapError::shape(format!(
                "fusion inputs must be {t_len}x{d_v}, got {:?}, {:?}, anchor {}",
                y_ssm.shape(),
                y_attn.shape(),
                anchor.len()
            )));
        }
        let wres = store.value(self.wres);
        let bres = store.value(self.bres).data();
        let mut gate_input = column_mean(y_ssm);
        gate_input.extend(column_mean(y_attn));
        gate_input.extend_from_slice(anchor);
        let mut logits = store.value(self.bg).data().to_vec();
        let mut wz = vec![0.0; 3];
        matvec(store.value(self.wg), &gate_input, &mut wz);
        add_into(&mut logits, &wz);
        let g = softmax_slice(&logits, 1.0);
        let gates = [g[0], g[1], g[2]];

        let mut v_seq = Tensor::zeros(&[t_len, d_v]);
        let mut pooled = vec![0.0; d_v];
        for t in 0..t_len {
            let row = v_seq.row_mut(t);
            matvec(wres, seq.frame(t), row);
            for k in 0..d_v {
                row[k] += bres[k]
                    + gates[0] * y_ssm.at(t, k)
                    + gates[1] * y_attn.at(t, k)
                    + gates[2] * anchor[k];
            }
            add_into(&mut pooled, row);
        }
        let inv = 1.0 / t_len as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        Ok((
            FusionOutput {
                v_seq,
                pooled,
                gates,
            },
            FusionCache { gate_input },
        ))
    }

    pub(crate) fn backward(
        &self,
        seq: &FrameSequence,
        y_ssm: &Tensor,
        y_attn: &Tensor,
        anchor: &[f64],
        gates: [f64; 3],
        cache: &FusionCache,
        store: &ParamStore,
        grad_seq: &Tensor,
        grad_pooled: &[f64],
        grads: &mut [Tensor],
    ) -> FusionGrads {
        let (t_len, d_v) = (seq.len(), seq.dim());
        let inv = 1.0 / t_len as f64;
        let mut g_total = vec![0.0; d_v];
        let mut g_gates = [0.0; 3];
        let mut g_ys = Tensor::zeros(&[t_len, d_v]);
        let mut g_ya = Tensor::zeros(&[t_len, d_v]);
        {
            let mut g_wres = std::mem::replace(&mut grads[self.wres.index()], Tensor::scalar(0.0));
            for t in 0..t_len {
                let row: Vec<f64> = grad_seq
                    .row(t)
                    .iter()
                    .zip(grad_pooled)
                    .map(|(a, b)| a + b * inv)
                    .collect();
                g_gates[0] += dot(&row, y_ssm.row(t));
                g_gates[1] += dot(&row, y_attn.row(t));
                for k in 0..d_v {
                    g_ys.row_mut(t)[k] = gates[0] * row[k];
                    g_ya.row_mut(t)[k] = gates[1] * row[k];
                }
                outer_acc(&mut g_wres, &row, seq.frame(t), 1.0);
                add_into(&mut g_total, &row);
            }
            grads[self.wres.index()] = g_wres;
        }
        add_into(grads[self.bres.index()].data_mut(), &g_total);
        g_gates[2] = dot(&g_total, anchor);

        let glogits = softmax_logit_grad(&gates, &g_gates);
        outer_acc(
            &mut grads[self.wg.index()],
            &glogits,
            &cache.gate_input,
            1.0,
        );
        add_into(grads[self.bg.index()].data_mut(), &glogits);
        let mut gz = vec![0.0; 3 * d_v];
        matvec_t_acc(store.value(self.wg), &glogits, &mut gz);

        for t in 0..t_len {
            for k in 0..d_v {
                g_ys.row_mut(t)[k] += gz[k] * inv;
                g_ya.row_mut(t)[k] += gz[d_v + k] * inv;
            }
        }
        let g_anchor = (0..d_v)
            .map(|k| gates[2] * g_total[k] + gz[2 * d_v + k])
            .collect();
        FusionGrads {
            y_ssm: g_ys,
            y_attn: g_ya,
            anchor: g_anchor,
        }
    }
}
