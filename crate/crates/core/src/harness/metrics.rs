//! Regression and ranking metrics.

use crate::error::{Result, StapError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    /// MSE over label variance; NaN when labels are constant.
    pub nmse: f64,
    /// Spearman correlation; NaN when labels are constant, 0 when
    /// predictions are constant.
    pub src: f64,
    /// Set when labels are constant and `nmse`/`src` are undefined.
    pub constant_labels: bool,
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn compute_metrics(preds: &[f64], labels: &[f64]) -> Result<MetricReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(StapError::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(StapError::Data("metrics need finite inputs".into()));
    }
    let n = preds.len() as f64;
    let mae = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / n;
    let mse = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let constant_labels = var == 0.0;
    let (nmse, src) = if constant_labels {
        (f64::NAN, f64::NAN)
    } else {
        (mse / var, spearman(preds, labels).unwrap_or(0.0))
    };
    Ok(MetricReport {
        n: preds.len(),
        mae,
        nmse,
        src,
        constant_labels,
    })
}

/// Fraction of `(higher, lower)` label pairs whose predictions keep the order.
pub fn pair_accuracy(preds: &[f64], pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let hits = pairs
        .iter()
        .filter(|&&(hi, lo)| preds[hi] > preds[lo])
        .count();
    Some(hits as f64 / pairs.len() as f64)
}
