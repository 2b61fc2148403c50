//! Experiment harness: metrics, scaling benchmarks, variant runs, grid
//! search, training-proportion sweeps and diagnostic exports.

pub mod ablation;
pub mod bench;
pub mod export;
pub mod grid;
pub mod metrics;
pub mod robustness;

use crate::predictor::{LossConfig, ModelConfig, TrainConfig};
use crate::synth::SynthConfig;

pub use ablation::{margin_pairs, run_ablation, run_on_corpus, AblationResult, Variant};
pub use bench::{bench_scaling, BenchConfig, BenchKernel, ScalingReport};
pub use export::export_diagnostics;
pub use grid::{grid_search, GridRow};
pub use metrics::{compute_metrics, pair_accuracy, spearman, MetricReport};
pub use robustness::{robustness_sweep, RobustnessRow};

/// Everything one training run needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}
