//! Routing regularizers: load balance toward asymmetric priors and pairwise
//! preference over routing log-probabilities.

use crate::error::{Result, StapError};
use crate::numerics::kernels::{kl_divergence, kl_divergence_backward, sigmoid, KL_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceConfig {
    /// Weight of the partition-marginal KL term.
    pub gamma_lb: f64,
    /// Weight of the cluster-marginal KL term.
    pub beta_lb: f64,
    /// Power-law exponent of the partition prior.
    pub zipf_exponent: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            gamma_lb: 0.01,
            beta_lb: 0.01,
            zipf_exponent: 1.0,
        }
    }
}

/// Power-law prior over partitions. Partition `P-1` holds the highest labels
/// and has rank 1.
pub fn zipf_prior(partitions: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..partitions)
        .map(|p| ((partitions - p) as f64).powf(-exponent))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceLoss {
    pub value: f64,
    pub partition_marginal: Vec<f64>,
    pub cluster_marginal: Vec<f64>,
    /// `dL/dπ` per batch item, flat `P * C`.
    pub grads: Vec<Vec<f64>>,
}

/// Validates that a routing row is a probability distribution.
fn check_distribution(row: &[f64], i: usize) -> Result<()> {
    let s: f64 = row.iter().sum();
    if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(StapError::Data(format!(
            "routing row {i} is not a distribution (sum {s})"
        )));
    }
    Ok(())
}

pub fn load_balance_loss(
    soft: &[&[f64]],
    partitions: usize,
    clusters: usize,
    cfg: &BalanceConfig,
) -> Result<BalanceLoss> {
    if soft.is_empty() {
        return Err(StapError::Data("empty routing batch".into()));
    }
    let b = soft.len() as f64;
    let mut ph = vec![0.0; partitions];
    let mut pt = vec![0.0; clusters];
    for (i, row) in soft.iter().enumerate() {
        if row.len() != partitions * clusters {
            return Err(StapError::shape(format!(
                "routing row {i} has {} entries, expected {}",
                row.len(),
                partitions * clusters
            )));
        }
        check_distribution(row, i)?;
        for p in 0..partitions {
            for c in 0..clusters {
                let v = row[p * clusters + c] / b;
                ph[p] += v;
                pt[c] += v;
            }
        }
    }
    let prior_h = zipf_prior(partitions, cfg.zipf_exponent);
    let prior_t = vec![1.0 / clusters as f64; clusters];
    let kl_h = kl_divergence(&ph, &prior_h, KL_EPS)?.value;
    let kl_t = kl_divergence(&pt, &prior_t, KL_EPS)?.value;
    let (gh, _) = kl_divergence_backward(&ph, &prior_h, KL_EPS, cfg.gamma_lb / b);
    let (gt, _) = kl_divergence_backward(&pt, &prior_t, KL_EPS, cfg.beta_lb / b);
    let mut g = vec![0.0; partitions * clusters];
    for p in 0..partitions {
        for c in 0..clusters {
            g[p * clusters + c] = gh[p] + gt[c];
        }
    }
    Ok(BalanceLoss {
        value: cfg.gamma_lb * kl_h + cfg.beta_lb * kl_t,
        partition_marginal: ph,
        cluster_marginal: pt,
        grads: vec![g; soft.len()],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DppoLoss {
    pub value: f64,
    pub pairs: usize,
    /// Set when there were no pairs; `value` is then 0.
    pub no_pairs: bool,
    /// `(dL/dπ⁺, dL/dπ⁻)` per pair.
    pub grads: Vec<(Vec<f64>, Vec<f64>)>,
}

fn log_gap(pos: &[f64], neg: &[f64]) -> f64 {
    pos.iter()
        .zip(neg)
        .map(|(a, b)| a.max(KL_EPS).ln() - b.max(KL_EPS).ln())
        .sum()
}

/// Mean of `-ln σ(γ Σ [ln π⁺ - ln π⁻])` over pairs, on soft probabilities.
pub fn dppo_loss(pairs: &[(&[f64], &[f64])], gamma: f64) -> Result<DppoLoss> {
    if pairs.is_empty() {
        return Ok(DppoLoss {
            value: 0.0,
            pairs: 0,
            no_pairs: true,
            grads: Vec::new(),
        });
    }
    let n = pairs.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (pos, neg) in pairs {
        if pos.len() != neg.len() {
            return Err(StapError::shape("preference pair rows differ in length"));
        }
        let z = gamma * log_gap(pos, neg);
        // -ln σ(z) = softplus(-z)
        value += crate::numerics::kernels::softplus(-z);
        let dz = -gamma * sigmoid(-z) / n;
        let gp = pos
            .iter()
            .map(|&p| if p > KL_EPS { dz / p } else { 0.0 })
            .collect();
        let gn = neg
            .iter()
            .map(|&p| if p > KL_EPS { -dz / p } else { 0.0 })
            .collect();
        grads.push((gp, gn));
    }
    Ok(DppoLoss {
        value: value / n,
        pairs: pairs.len(),
        no_pairs: false,
        grads,
    })
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.is_empty() {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Greedy `(more popular, less popular)` pairs whose labels differ by more
/// than `margin_factor * std(labels)`. Each item appears in at most two pairs.
pub fn form_pairs(labels: &[f64], margin_factor: f64) -> Vec<(usize, usize)> {
    let margin = margin_factor * std_dev(labels);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].total_cmp(&labels[a]).then(a.cmp(&b)));
    let mut uses = vec![0u8; labels.len()];
    let mut pairs = Vec::new();
    for (i, &hi) in order.iter().enumerate() {
        if uses[hi] >= 2 {
            continue;
        }
        if let Some(&lo) = order[i + 1..]
            .iter()
            .find(|&&lo| uses[lo] < 2 && labels[hi] - labels[lo] > margin)
        {
            uses[hi] += 1;
            uses[lo] += 1;
            pairs.push((hi, lo));
        }
    }
    pairs
}
