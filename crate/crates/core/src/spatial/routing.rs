//! Prototype-grid routing with hard top-K gates and a straight-through
//! backward pass.

use crate::error::{Result, StapError};
use crate::numerics::kernels::{
    normalize_backward_slice, normalize_slice, softmax_logit_grad, softmax_slice, LayerNormCache,
    LN_EPS,
};
use crate::numerics::tensor::{dot, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::spatial::bank::MemoryBank;

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult {
    /// `S`, shape `[P, C]`.
    pub scores: Tensor,
    /// Softmax of `S / τ` over every slot, shape `[P, C]`.
    pub soft: Tensor,
    /// Top-K gate values, zero elsewhere, shape `[P, C]`.
    pub gate: Tensor,
    /// Selected `(partition, cluster)` pairs, best first.
    pub selected: Vec<(usize, usize)>,
    /// Same selection as flat slot indices `p * C + c`.
    pub selected_flat: Vec<usize>,
    pub z_aug: Vec<f64>,
    pub c_pop: f64,
    /// `q' = tanh(LN(W_q q))`.
    pub query_proj: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct RouteCache {
    ln: LayerNormCache,
    renormalized: bool,
}

/// Gradients produced by [`route_backward`].
#[derive(Clone, Debug)]
pub struct RouteGrads {
    pub query: Vec<f64>,
    pub w_q: Tensor,
    pub slots: Tensor,
    pub tau: f64,
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub(crate) fn route_cached(
    query: &[f64],
    bank: &MemoryBank,
    w_q: &Tensor,
    k: usize,
    renormalize: bool,
) -> Result<(RoutingResult, RouteCache)> {
    let n = bank.slot_count();
    if k == 0 || k > n {
        return Err(StapError::invalid(format!(
            "top-K must lie in [1, {n}], got {k}"
        )));
    }
    if w_q.rank() != 2 || w_q.cols() != query.len() || w_q.rows() != bank.dim {
        return Err(StapError::shape(format!(
            "query projection {:?} does not map a {}-vector to slot width {}",
            w_q.shape(),
            query.len(),
            bank.dim
        )));
    }
    let d = bank.dim;
    let mut m = vec![0.0; d];
    matvec(w_q, query, &mut m);
    let (normed, ln) = normalize_slice(&m, LN_EPS);
    let q: Vec<f64> = normed.iter().map(|v| v.tanh()).collect();

    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..n).map(|s| dot(&q, bank.slot(s)) * scale).collect();
    let soft = softmax_slice(&scores, bank.temperature());
    let selected_flat = top_k_indices(&soft, k);
    let mut gate = vec![0.0; n];
    for &s in &selected_flat {
        gate[s] = soft[s];
    }
    if renormalize {
        let total: f64 = selected_flat.iter().map(|&s| soft[s]).sum();
        for &s in &selected_flat {
            gate[s] /= total;
        }
    }
    let mut z_aug = vec![0.0; d];
    let mut c_pop = 0.0;
    for &s in &selected_flat {
        for (z, v) in z_aug.iter_mut().zip(bank.slot(s)) {
            *z += gate[s] * v;
        }
        c_pop += gate[s] * bank.centroid(s);
    }
    let shape = [bank.partitions, bank.clusters];
    let selected = selected_flat
        .iter()
        .map(|&s| (s / bank.clusters, s % bank.clusters))
        .collect();
    Ok((
        RoutingResult {
            scores: Tensor::new(shape.to_vec(), scores)?,
            soft: Tensor::new(shape.to_vec(), soft)?,
            gate: Tensor::new(shape.to_vec(), gate)?,
            selected,
            selected_flat,
            z_aug,
            c_pop,
            query_proj: q,
        },
        RouteCache {
            ln,
            renormalized: renormalize,
        },
    ))
}

/// Routes one query through the bank with non-renormalized top-K gates.
pub fn route(query: &[f64], bank: &MemoryBank, w_q: &Tensor, k: usize) -> Result<RoutingResult> {
    route_cached(query, bank, w_q, k, false).map(|(r, _)| r)
}

pub fn route_with(
    query: &[f64],
    bank: &MemoryBank,
    w_q: &Tensor,
    k: usize,
    renormalize: bool,
) -> Result<RoutingResult> {
    route_cached(query, bank, w_q, k, renormalize).map(|(r, _)| r)
}

/// Backward of [`route`] given gradients of `z_aug`, `c_pop` and the soft
/// probabilities. The hard selection is held fixed.
pub(crate) fn route_backward(
    query: &[f64],
    bank: &MemoryBank,
    w_q: &Tensor,
    result: &RoutingResult,
    cache: &RouteCache,
    grad_z: &[f64],
    grad_c: f64,
    grad_soft: &[f64],
) -> RouteGrads {
    let n = bank.slot_count();
    let d = bank.dim;
    let tau = bank.temperature();
    let soft = result.soft.data();
    let gate = result.gate.data();
    let mut g_slots = Tensor::zeros(&[bank.partitions, bank.clusters, d]);

    // aggregation: z = Σ gate_k M_k, c = Σ gate_k μ_k
    let mut g_gate = vec![0.0; n];
    for &s in &result.selected_flat {
        g_gate[s] = dot(grad_z, bank.slot(s)) + grad_c * bank.centroid(s);
        for (g, z) in g_slots.data_mut()[s * d..(s + 1) * d]
            .iter_mut()
            .zip(grad_z)
        {
            *g += gate[s] * z;
        }
    }
    let mut g_soft = grad_soft.to_vec();
    if cache.renormalized {
        let total: f64 = result.selected_flat.iter().map(|&s| soft[s]).sum();
        let inner: f64 = result
            .selected_flat
            .iter()
            .map(|&s| g_gate[s] * gate[s])
            .sum();
        for &s in &result.selected_flat {
            g_soft[s] += (g_gate[s] - inner) / total;
        }
    } else {
        for &s in &result.selected_flat {
            g_soft[s] += g_gate[s];
        }
    }

    // soft = softmax(S / τ)
    let g_logits = softmax_logit_grad(soft, &g_soft);
    let scores = result.scores.data();
    let g_tau = -g_logits.iter().zip(scores).map(|(g, s)| g * s).sum::<f64>() / (tau * tau);
    let scale = 1.0 / (d as f64).sqrt();
    let mut g_q = vec![0.0; d];
    for s in 0..n {
        let gs = g_logits[s] / tau * scale;
        if gs == 0.0 {
            continue;
        }
        for (g, m) in g_q.iter_mut().zip(bank.slot(s)) {
            *g += gs * m;
        }
        for (g, q) in g_slots.data_mut()[s * d..(s + 1) * d]
            .iter_mut()
            .zip(&result.query_proj)
        {
            *g += gs * q;
        }
    }

    // q' = tanh(LN(W_q q))
    let g_norm: Vec<f64> = g_q
        .iter()
        .zip(&result.query_proj)
        .map(|(g, q)| g * (1.0 - q * q))
        .collect();
    let g_m = normalize_backward_slice(&cache.ln, &g_norm);
    let mut g_wq = w_q.zeros_like();
    outer_acc(&mut g_wq, &g_m, query, 1.0);
    let mut g_query = vec![0.0; query.len()];
    matvec_t_acc(w_q, &g_m, &mut g_query);
    RouteGrads {
        query: g_query,
        w_q: g_wq,
        slots: g_slots,
        tau: g_tau,
    }
}

/// `q' = tanh(LN(W_q q))`, the projected query used for routing and for
/// seeding the bank.
pub fn project_query(query: &[f64], w_q: &Tensor) -> Result<Vec<f64>> {
    if w_q.rank() != 2 || w_q.cols() != query.len() {
        return Err(StapError::shape(format!(
            "query projection {:?} cannot take a {}-vector",
            w_q.shape(),
            query.len()
        )));
    }
    let mut m = vec![0.0; w_q.rows()];
    matvec(w_q, query, &mut m);
    let (normed, _) = normalize_slice(&m, LN_EPS);
    Ok(normed.iter().map(|v| v.tanh()).collect())
}
