//! Selective state-space scan with a per-frame dynamic step size.
//!
//! Per step: `h_t = exp(-Δ_t λ) ⊙ h_{t-1} + Δ_t (B x_t)`, `y_t = C h_t + D ⊙ x_t`,
//! with `λ = softplus(Λ_raw)` and Euler discretization of the input matrix.

use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{
    cosine_similarity, cosine_similarity_backward, sigmoid, softplus, softplus_inv,
};
use crate::numerics::tensor::{add_into, dot, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::numerics::{ParamId, ParamStore};
use crate::temporal::scoring::FrameScoreOutput;
use crate::temporal::FrameSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaMode {
    /// `Δ_t = Δ0 (1 + α (1 - w_t))`: salient frames get a smaller step.
    Score,
    /// `Δ_t = Δ_base + α cos(g, x_t) + ρ w_t`.
    Anchor,
}

impl std::str::FromStr for DeltaMode {
    type Err = StapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(DeltaMode::Score),
            "anchor" => Ok(DeltaMode::Anchor),
            other => Err(StapError::invalid(format!("unknown delta mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_h: usize,
    pub delta_base: f64,
    pub alpha: f64,
    pub rho: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub mode: DeltaMode,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_h: 16,
            delta_base: 0.25,
            alpha: 2.0,
            rho: 0.1,
            delta_min: 0.01,
            delta_max: 1.0,
            mode: DeltaMode::Score,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(StapError::invalid("SSM hidden width must be positive"));
        }
        if !(0.0 < self.delta_min
            && self.delta_min <= self.delta_base
            && self.delta_base <= self.delta_max)
        {
            return Err(StapError::invalid(format!(
                "step bounds must satisfy 0 < Δ_min ≤ Δ_base ≤ Δ_max, got {} / {} / {}",
                self.delta_min, self.delta_base, self.delta_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub lambda_raw: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d: ParamId,
    pub cfg: SsmConfig,
}

/// Per-frame steps with the derivative of the clamp (1 inside the bounds, 0 when clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct Steps {
    pub delta: Vec<f64>,
    pub pass: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct ScanCache {
    direction: Direction,
    /// States in processing order, `states[0]` is the zero initial state.
    states: Vec<Vec<f64>>,
    decay: Vec<Vec<f64>>,
    bx: Vec<Vec<f64>>,
}

fn frame_order(t_len: usize, direction: Direction) -> Box<dyn Iterator<Item = usize>> {
    match direction {
        Direction::Forward => Box::new(0..t_len),
        Direction::Backward => Box::new((0..t_len).rev()),
    }
}

impl SsmBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_v: usize,
        cfg: SsmConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d_h = cfg.d_h;
        let lambda: Vec<f64> = (0..d_h)
            .map(|_| softplus_inv(rng.random_range(0.5..=1.5)))
            .collect();
        Ok(SsmBlock {
            lambda_raw: store.add(format!("{prefix}.lambda_raw"), Tensor::vector(lambda)),
            b: store.add(
                format!("{prefix}.b"),
                Tensor::uniform(&[d_h, d_v], 1.0 / (d_v as f64).sqrt(), rng),
            ),
            c: store.add(
                format!("{prefix}.c"),
                Tensor::uniform(&[d_v, d_h], 1.0 / (d_h as f64).sqrt(), rng),
            ),
            d: store.add(format!("{prefix}.d"), Tensor::filled(&[d_v], 1.0)),
            cfg,
        })
    }

    pub fn steps(&self, seq: &FrameSequence, scores: &FrameScoreOutput) -> Steps {
        let c = &self.cfg;
        let mut delta = Vec::with_capacity(seq.len());
        let mut pass = Vec::with_capacity(seq.len());
        for (t, &w) in scores.weights.iter().enumerate() {
            let raw = match c.mode {
                DeltaMode::Score => c.delta_base * (1.0 + c.alpha * (1.0 - w)),
                DeltaMode::Anchor => {
                    c.delta_base
                        + c.alpha * cosine_similarity(&scores.anchor, seq.frame(t))
                        + c.rho * w
                }
            };
            let clamped = raw.clamp(c.delta_min, c.delta_max);
            delta.push(clamped);
            pass.push(if clamped == raw { 1.0 } else { 0.0 });
        }
        Steps { delta, pass }
    }

    pub(crate) fn scan(
        &self,
        seq: &FrameSequence,
        delta: &[f64],
        store: &ParamStore,
        direction: Direction,
    ) -> Result<(Tensor, ScanCache)> {
        let (t_len, d_v) = (seq.len(), seq.dim());
        let d_h = self.cfg.d_h;
        let b = store.value(self.b);
        let c = store.value(self.c);
        let dskip = store.value(self.d).data();
        if b.shape() != [d_h, d_v] || c.shape() != [d_v, d_h] || dskip.len() != d_v {
            return Err(StapError::shape(format!(
                "SSM parameters do not match d_v={d_v}, d_h={d_h}"
            )));
        }
        if delta.len() != t_len {
            return Err(StapError::shape("step count differs from frame count"));
        }
        let lambda: Vec<f64> = store
            .value(self.lambda_raw)
            .data()
            .iter()
            .map(|&r| softplus(r))
            .collect();

        let mut y = Tensor::zeros(&[t_len, d_v]);
        let mut states = Vec::with_capacity(t_len + 1);
        let mut decay = Vec::with_capacity(t_len);
        let mut bxs = Vec::with_capacity(t_len);
        states.push(vec![0.0; d_h]);
        for t in frame_order(t_len, direction) {
            let x = seq.frame(t);
            let dt = delta[t];
            let a: Vec<f64> = lambda.iter().map(|l| (-dt * l).exp()).collect();
            let mut bx = vec![0.0; d_h];
            matvec(b, x, &mut bx);
            let prev = states.last().unwrap();
            let h: Vec<f64> = (0..d_h).map(|i| a[i] * prev[i] + dt * bx[i]).collect();
            let out = y.row_mut(t);
            matvec(c, &h, out);
            for ((o, dk), xk) in out.iter_mut().zip(dskip).zip(x) {
                *o += dk * xk;
            }
            states.push(h);
            decay.push(a);
            bxs.push(bx);
        }
        Ok((
            y,
            ScanCache {
                direction,
                states,
                decay,
                bx: bxs,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient of each step size.
    pub(crate) fn scan_backward(
        &self,
        seq: &FrameSequence,
        delta: &[f64],
        store: &ParamStore,
        cache: &ScanCache,
        grad_y: &Tensor,
        grads: &mut [Tensor],
    ) -> Vec<f64> {
        let (t_len, d_v) = (seq.len(), seq.dim());
        let d_h = self.cfg.d_h;
        let raw = store.value(self.lambda_raw).data();
        let lambda: Vec<f64> = raw.iter().map(|&r| softplus(r)).collect();
        let c = store.value(self.c);

        let mut g_lambda = vec![0.0; d_h];
        let mut g_d = vec![0.0; d_v];
        let mut g_b = std::mem::replace(&mut grads[self.b.index()], Tensor::scalar(0.0));
        let mut g_c = std::mem::replace(&mut grads[self.c.index()], Tensor::scalar(0.0));
        let mut g_delta = vec![0.0; t_len];
        let mut gh_next = vec![0.0; d_h];
        let order: Vec<usize> = frame_order(t_len, cache.direction).collect();
        for s in (0..t_len).rev() {
            let t = order[s];
            let gy = grad_y.row(t);
            let x = seq.frame(t);
            let h = &cache.states[s + 1];
            let prev = &cache.states[s];
            let a = &cache.decay[s];
            let dt = delta[t];
            outer_acc(&mut g_c, gy, h, 1.0);
            for k in 0..d_v {
                g_d[k] += gy[k] * x[k];
            }
            // gh = Cᵀ gy + a_{s+1} ⊙ gh_{s+1}
            let mut gh = gh_next.clone();
            matvec_t_acc(c, gy, &mut gh);
            let mut gd = dot(&gh, &cache.bx[s]);
            for i in 0..d_h {
                let da = gh[i] * prev[i] * a[i];
                g_lambda[i] -= da * dt;
                gd -= da * lambda[i];
            }
            g_delta[t] = gd;
            outer_acc(&mut g_b, &gh, x, dt);
            gh_next = gh.iter().zip(a).map(|(g, ai)| g * ai).collect();
        }
        grads[self.b.index()] = g_b;
        grads[self.c.index()] = g_c;
        let g_raw: Vec<f64> = g_lambda
            .iter()
            .zip(raw)
            .map(|(g, r)| g * sigmoid(*r))
            .collect();
        add_into(grads[self.lambda_raw.index()].data_mut(), &g_raw);
        add_into(grads[self.d.index()].data_mut(), &g_d);
        g_delta
    }

    /// Maps step-size gradients back to frame weights and the anchor.
    pub(crate) fn steps_backward(
        &self,
        seq: &FrameSequence,
        scores: &FrameScoreOutput,
        steps: &Steps,
        grad_delta: &[f64],
        grad_weights: &mut [f64],
        grad_anchor: &mut [f64],
    ) {
        let c = &self.cfg;
        for t in 0..seq.len() {
            let g = grad_delta[t] * steps.pass[t];
            if g == 0.0 {
                continue;
            }
            match c.mode {
                DeltaMode::Score => grad_weights[t] -= g * c.delta_base * c.alpha,
                DeltaMode::Anchor => {
                    grad_weights[t] += g * c.rho;
                    let (ga, _) =
                        cosine_similarity_backward(&scores.anchor, seq.frame(t), g * c.alpha);
                    add_into(grad_anchor, &ga);
                }
            }
        }
    }
}

/// One directional scan over the whole sequence.
pub fn ssm_scan(
    seq: &FrameSequence,
    scores: &FrameScoreOutput,
    block: &SsmBlock,
    store: &ParamStore,
    direction: Direction,
) -> Result<Tensor> {
    if scores.weights.len() != seq.len() {
        return Err(StapError::shape(
            "frame scores do not match sequence length",
        ));
    }
    let steps = block.steps(seq, scores);
    block
        .scan(seq, &steps.delta, store, direction)
        .map(|(y, _)| y)
}

/// Sum of the forward and backward scans.
pub fn bidirectional_ssm(
    seq: &FrameSequence,
    scores: &FrameScoreOutput,
    block: &SsmBlock,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut y = ssm_scan(seq, scores, block, store, Direction::Forward)?;
    let yb = ssm_scan(seq, scores, block, store, Direction::Backward)?;
    y.axpy(1.0, &yb);
    Ok(y)
}
