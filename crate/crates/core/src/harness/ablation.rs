//! Variant training runs on the synthetic corpus.

use std::fmt;
use std::str::FromStr;

use super::metrics::{compute_metrics, pair_accuracy, MetricReport};
use super::ExperimentConfig;
use crate::error::{Result, StapError};
use crate::predictor::{fit, StapModel, TrainHistory};
use crate::spatial::losses::std_dev;
use crate::spatial::stats::SlotStats;
use crate::synth::{generate_corpus, Corpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoBalance,
    NoDppo,
    Top1,
    NoFrameScoring,
    NoSsm,
    NoSparseAttn,
    /// Retrieval block fixed at zero; no routing.
    NoMemory,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoBalance,
        Variant::NoDppo,
        Variant::Top1,
        Variant::NoFrameScoring,
        Variant::NoSsm,
        Variant::NoSparseAttn,
        Variant::NoMemory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBalance => "no_balance",
            Variant::NoDppo => "no_dppo",
            Variant::Top1 => "top1",
            Variant::NoFrameScoring => "no_frame_scoring",
            Variant::NoSsm => "no_ssm",
            Variant::NoSparseAttn => "no_sparse_attn",
            Variant::NoMemory => "no_memory",
        }
    }

    /// The experiment configuration with this variant's switch applied.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoBalance => {
                cfg.loss.balance.gamma_lb = 0.0;
                cfg.loss.balance.beta_lb = 0.0;
            }
            Variant::NoDppo => cfg.loss.lambda_pref = 0.0,
            Variant::Top1 => cfg.model.top_k = 1,
            Variant::NoFrameScoring => cfg.model.temporal.use_frame_scoring = false,
            Variant::NoSsm => cfg.model.temporal.use_ssm = false,
            Variant::NoSparseAttn => cfg.model.temporal.use_sparse_attn = false,
            Variant::NoMemory => cfg.model.use_memory = false,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = StapError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                StapError::invalid(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricReport,
    /// Held-out accuracy over every test pair whose label gap exceeds the
    /// preference margin.
    pub pair_accuracy: Option<f64>,
    pub slot_history: Vec<SlotStats>,
    pub history: TrainHistory,
    pub test_predictions: Vec<f64>,
    pub model: StapModel,
}

/// All `(higher, lower)` index pairs with a label gap above
/// `margin_factor * std(labels)`.
pub fn margin_pairs(labels: &[f64], margin_factor: f64) -> Vec<(usize, usize)> {
    let margin = margin_factor * std_dev(labels);
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] - labels[j] > margin {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Trains one variant on a prebuilt corpus and evaluates it on the test split.
pub fn run_on_corpus(
    variant: Variant,
    base: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
) -> Result<AblationResult> {
    let mut cfg = variant.apply(base);
    cfg.train.seed = seed;
    let train = corpus.train_items();
    let mut model = StapModel::new(cfg.model.clone(), &train, seed)?;
    let history = fit(&mut model, &train, &cfg.loss, &cfg.train, None)?;
    let test = corpus.test_items();
    let preds = model.predict(&test)?;
    let labels: Vec<f64> = test.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&preds, &labels)?;
    let pair_accuracy = pair_accuracy(&preds, &margin_pairs(&labels, cfg.loss.pair_margin));
    let slot_history = history
        .epochs
        .iter()
        .filter_map(|e| e.slots.clone())
        .collect();
    Ok(AblationResult {
        variant,
        seed,
        metrics,
        pair_accuracy,
        slot_history,
        history,
        test_predictions: preds,
        model,
    })
}

/// Generates the corpus from `seed` and trains `variant` on it.
pub fn run_ablation(
    variant: Variant,
    base: &ExperimentConfig,
    seed: u64,
) -> Result<AblationResult> {
    let mut synth = base.synth.clone();
    synth.seed = seed;
    let corpus = generate_corpus(&synth)?;
    run_on_corpus(variant, base, &corpus, seed)
}
