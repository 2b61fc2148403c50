//! Gradient-descent training with the post-step bank refresh.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dead_parameters, evaluate_batch, LossBreakdown, LossConfig, Sample, StapModel};
use crate::error::{Result, StapError};
use crate::spatial::bank::update_bank;
use crate::spatial::stats::{slot_statistics, SlotStats};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// EMA rate of the bank refresh.
    pub ema_eta: f64,
    pub tau_lr: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Fail before training if an active parameter gets no gradient.
    pub check_dead_parameters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 20,
            ema_eta: 0.05,
            tau_lr: 1e-2,
            seed: 0,
            check_dead_parameters: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.tau_lr >= 0.0) {
            return Err(StapError::invalid(
                "learning rates must be positive and weight decay non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(StapError::invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_eta) {
            return Err(StapError::invalid(format!(
                "EMA rate {} outside [0, 1]",
                self.ema_eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Routing entropy and Gini over the batch; absent without memory.
    pub entropy: Option<f64>,
    pub gini: Option<f64>,
    /// Soft routing rows of the batch, flat `P * C` each.
    pub soft: Vec<Vec<f64>>,
}

/// One optimizer step: forward, objective, backward, SGD with weight decay on
/// every parameter except τ, then the bank refresh and τ step, then zeroed
/// gradients.
pub fn train_step(
    model: &mut StapModel,
    batch: &[&Sample],
    loss: &LossConfig,
    train: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    let eval = evaluate_batch(model, batch, loss)?;
    model.store.accumulate(&eval.grads.params)?;
    model.bank.slots.grad.axpy(1.0, &eval.grads.slots);
    model.bank.tau.grad.data_mut()[0] += eval.grads.tau;

    let (lr, wd) = (train.learning_rate, train.weight_decay);
    let memory = model.cfg.use_memory;
    let mut params: Vec<_> = model.store.iter_mut().collect();
    if memory {
        params.push(&mut model.bank.slots);
    }
    for p in params {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * (g + wd * *v);
        }
    }
    let soft: Vec<Vec<f64>> = eval.routes.iter().map(|r| r.soft.data().to_vec()).collect();
    let (mut entropy, mut gini) = (None, None);
    if memory {
        let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();
        update_bank(
            &mut model.bank,
            &eval.routes,
            &labels,
            train.ema_eta,
            train.tau_lr,
        )?;
        let rows: Vec<&[f64]> = soft.iter().map(|r| r.as_slice()).collect();
        let stats = slot_statistics(&rows, model.cfg.partitions, model.cfg.clusters, 1)?;
        entropy = Some(stats.entropy);
        gini = Some(stats.gini);
    }
    model.store.zero_grads();
    model.bank.slots.zero_grad();
    model.bank.tau.zero_grad();
    Ok(StepReport {
        step,
        loss: eval.loss,
        entropy,
        gini,
        soft,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_total: f64,
    /// Routing statistics over every training item routed this epoch.
    pub slots: Option<SlotStats>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
}

impl TrainHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }

    /// CSV `step,total,reg,pref,balance,entropy,gini` after a seed comment.
    pub fn write_log(&self, seed: u64, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# seed={seed}")?;
        writeln!(w, "step,total,reg,pref,balance,entropy,gini")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for s in &self.steps {
            let l = &s.loss;
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
                s.step,
                l.total,
                l.reg,
                l.pref,
                l.balance,
                opt(s.entropy),
                opt(s.gini)
            )?;
        }
        Ok(())
    }
}

/// Mini-batch training for `train.epochs` epochs over a seeded shuffle.
/// `max_steps` stops early after that many steps when set.
pub fn fit(
    model: &mut StapModel,
    samples: &[&Sample],
    loss: &LossConfig,
    train: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<TrainHistory> {
    train.validate()?;
    if samples.is_empty() {
        return Err(StapError::invalid("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if train.check_dead_parameters {
        order.shuffle(&mut rng);
        let probe: Vec<&Sample> = order
            .iter()
            .take(train.batch_size)
            .map(|&i| samples[i])
            .collect();
        let dead = dead_parameters(model, &probe, loss)?;
        if !dead.is_empty() {
            return Err(StapError::Config(format!(
                "parameters without gradient at startup: {}",
                dead.join(", ")
            )));
        }
    }
    let mut history = TrainHistory::default();
    let limit = max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut totals = Vec::new();
        let mut routed: Vec<Vec<f64>> = Vec::new();
        for chunk in order.chunks(train.batch_size) {
            if history.steps.len() >= limit {
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let mut report = train_step(model, &batch, loss, train, history.steps.len() + 1)?;
            totals.push(report.loss.total);
            routed.append(&mut report.soft);
            history.steps.push(report);
        }
        let slots = if routed.is_empty() {
            None
        } else {
            let rows: Vec<&[f64]> = routed.iter().map(|r| r.as_slice()).collect();
            let slots = model.cfg.partitions * model.cfg.clusters;
            Some(slot_statistics(
                &rows,
                model.cfg.partitions,
                model.cfg.clusters,
                5.min(slots),
            )?)
        };
        history.epochs.push(EpochReport {
            epoch,
            mean_total: totals.iter().sum::<f64>() / totals.len().max(1) as f64,
            slots,
        });
    }
    Ok(history)
}
