//! Partition-by-cluster grid search.

use std::io::Write;

use super::ablation::{run_on_corpus, Variant};
use super::metrics::MetricReport;
use super::ExperimentConfig;
use crate::error::Result;
use crate::synth::generate_corpus;

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub partitions: usize,
    pub clusters: usize,
    /// `None` when the configuration cannot be filled from the training set.
    pub metrics: Option<MetricReport>,
}

impl GridRow {
    pub fn slots(&self) -> usize {
        self.partitions * self.clusters
    }
}

/// Trains the full model once per `(P, C)` on one corpus with a fixed budget.
/// Top-K is capped at the slot count.
pub fn grid_search(
    partitions: &[usize],
    clusters: &[usize],
    base: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<GridRow>> {
    let mut synth = base.synth.clone();
    synth.seed = seed;
    let corpus = generate_corpus(&synth)?;
    let n_train = corpus.train.len();
    let mut rows = Vec::new();
    for &p in partitions {
        for &c in clusters {
            let feasible = p > 0 && c > 0 && p * c <= n_train;
            let metrics = if feasible {
                let mut cfg = base.clone();
                cfg.model.partitions = p;
                cfg.model.clusters = c;
                cfg.model.top_k = cfg.model.top_k.min(p * c);
                Some(run_on_corpus(Variant::Full, &cfg, &corpus, seed)?.metrics)
            } else {
                None
            };
            rows.push(GridRow {
                partitions: p,
                clusters: c,
                metrics,
            });
        }
    }
    Ok(rows)
}

/// CSV `P,C,slots,MAE,nMSE,SRC` after a seed comment; skipped rows carry
/// `skipped` in the metric columns.
pub fn write_grid_csv(rows: &[GridRow], seed: u64, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "P,C,slots,MAE,nMSE,SRC")?;
    for r in rows {
        match &r.metrics {
            Some(m) => writeln!(
                w,
                "{},{},{},{:.17e},{:.17e},{:.17e}",
                r.partitions,
                r.clusters,
                r.slots(),
                m.mae,
                m.nmse,
                m.src
            )?,
            None => writeln!(
                w,
                "{},{},{},skipped,skipped,skipped",
                r.partitions,
                r.clusters,
                r.slots()
            )?,
        }
    }
    Ok(())
}
