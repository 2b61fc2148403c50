//! Training-proportion sweep: retrain the full model on shrinking prefixes of
//! the training split and compare held-out SRC against the largest fraction.

use std::io::Write;

use super::ablation::{run_on_corpus, Variant};
use super::metrics::MetricReport;
use super::ExperimentConfig;
use crate::error::{Result, StapError};
use crate::synth::generate_corpus;

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub fraction: f64,
    pub train_items: usize,
    pub metrics: MetricReport,
    /// SRC minus the SRC of the largest fraction in the sweep.
    pub delta_src: f64,
}

/// Fractions must lie in (0, 1]. The test split is shared by every row and
/// each prefix keeps at least one item per memory slot.
pub fn robustness_sweep(
    fractions: &[f64],
    base: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(StapError::invalid(
            "training fractions must be nonempty and lie in (0, 1]",
        ));
    }
    let mut synth = base.synth.clone();
    synth.seed = seed;
    let corpus = generate_corpus(&synth)?;
    let slots = base.model.partitions * base.model.clusters;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let n = ((fraction * corpus.train.len() as f64).ceil() as usize).max(1);
        if n < slots {
            return Err(StapError::invalid(format!(
                "training fraction {fraction} leaves {n} items for {slots} memory slots"
            )));
        }
        let mut sub = corpus.clone();
        sub.train.truncate(n);
        let metrics = run_on_corpus(Variant::Full, base, &sub, seed)?.metrics;
        rows.push(RobustnessRow {
            fraction,
            train_items: n,
            metrics,
            delta_src: f64::NAN,
        });
    }
    let reference = rows
        .iter()
        .max_by(|a, b| a.fraction.total_cmp(&b.fraction))
        .map(|r| r.metrics.src)
        .unwrap_or(f64::NAN);
    for r in &mut rows {
        r.delta_src = r.metrics.src - reference;
    }
    Ok(rows)
}

/// CSV `fraction,train_items,MAE,nMSE,SRC,delta_SRC` after a seed comment.
pub fn write_robustness_csv(
    rows: &[RobustnessRow],
    seed: u64,
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "fraction,train_items,MAE,nMSE,SRC,delta_SRC")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.fraction, r.train_items, r.metrics.mae, r.metrics.nmse, r.metrics.src, r.delta_src
        )?;
    }
    Ok(())
}
