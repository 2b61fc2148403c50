//! Slot-usage health statistics and heatmap export.

use std::io::Write;

use crate::error::{Result, StapError};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SlotStats {
    /// Mean soft activation per slot, shape `[P, C]`.
    pub mean_activation: Tensor,
    /// Shannon entropy of the mean activation divided by `ln(P C)`.
    pub entropy: f64,
    pub gini: f64,
    pub top_share: f64,
    pub top_k: usize,
}

pub fn normalized_entropy(mass: &[f64]) -> f64 {
    let total: f64 = mass.iter().sum();
    if mass.len() < 2 || total <= 0.0 {
        return 0.0;
    }
    let h: f64 = mass
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| {
            let p = m / total;
            -p * p.ln()
        })
        .sum();
    h / (mass.len() as f64).ln()
}

pub fn gini(mass: &[f64]) -> f64 {
    let mut sorted = mass.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum::<f64>()
        / (n * total)
}

pub fn top_share(mass: &[f64], k: usize) -> f64 {
    let mut sorted = mass.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    sorted.iter().take(k).sum::<f64>() / total
}

/// Statistics of the mean soft activation over a history of routing rows.
pub fn slot_statistics(
    history: &[&[f64]],
    partitions: usize,
    clusters: usize,
    top_k: usize,
) -> Result<SlotStats> {
    if history.is_empty() {
        return Err(StapError::Data("empty activation history".into()));
    }
    let n = partitions * clusters;
    let mut mean = vec![0.0; n];
    for row in history {
        if row.len() != n {
            return Err(StapError::shape(
                "activation row width differs from slot count",
            ));
        }
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let inv = 1.0 / history.len() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    Ok(SlotStats {
        entropy: normalized_entropy(&mean),
        gini: gini(&mean),
        top_share: top_share(&mean, top_k),
        top_k,
        mean_activation: Tensor::new(vec![partitions, clusters], mean)?,
    })
}

/// Writes `partition,cluster,mean_activation` rows preceded by a seed comment.
pub fn write_heatmap(stats: &SlotStats, seed: u64, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "partition,cluster,mean_activation")?;
    let c = stats.mean_activation.shape()[1];
    for (i, v) in stats.mean_activation.data().iter().enumerate() {
        writeln!(w, "{},{},{v:.17e}", i / c, i % c)?;
    }
    Ok(())
}
