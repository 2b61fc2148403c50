//! Popularity predictor: cross-modal attention, retrieval projection, the
//! regression head, the composite objective and the training step.

pub mod checkpoint;
pub mod cross;
pub mod head;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, StapError};
use crate::numerics::gradcheck::{compare_at, probe_coordinates, GradCheckConfig, GradCheckReport};
use crate::numerics::kernels::{huber, huber_grad};
use crate::numerics::tensor::{add_into, Tensor};
use crate::numerics::{ParamId, ParamStore};
use crate::spatial::bank::{init_bank_with, BankInit, MemoryBank};
use crate::spatial::losses::{dppo_loss, form_pairs, load_balance_loss, BalanceConfig};
use crate::spatial::routing::{
    project_query, route_backward, route_cached, RouteCache, RoutingResult,
};
use crate::temporal::{
    FrameSequence, TemporalBlock, TemporalCache, TemporalConfig, TemporalOutput,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use cross::{cross_attention, CrossAttention, CrossOutput};
pub use head::PredictionHead;
pub use train::{fit, train_step, EpochReport, StepReport, TrainConfig, TrainHistory};

/// One item: frames, text tokens, metadata and a log-popularity label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: FrameSequence,
    /// `L x d_t`.
    pub text: Tensor,
    pub meta: Vec<f64>,
    pub label: f64,
}

/// Checks that every item agrees on widths and has at least one text token.
pub fn validate_batch(batch: &[&Sample]) -> Result<()> {
    let first = batch
        .first()
        .ok_or_else(|| StapError::invalid("empty batch"))?;
    for (i, s) in batch.iter().enumerate() {
        if s.text.rank() != 2 || s.text.rows() == 0 {
            return Err(StapError::shape(format!(
                "item {i}: text must be L x d_t with L >= 1"
            )));
        }
        if s.frames.dim() != first.frames.dim()
            || s.text.cols() != first.text.cols()
            || s.meta.len() != first.meta.len()
        {
            return Err(StapError::shape(format!(
                "item {i}: widths differ from item 0"
            )));
        }
        if !s.label.is_finite() {
            return Err(StapError::Data(format!("item {i}: label is not finite")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub temporal: TemporalConfig,
    pub d_t: usize,
    pub d_u: usize,
    pub d_m: usize,
    /// Common width of the cross-attention streams and the head blocks.
    pub width: usize,
    pub head_hidden: usize,
    pub cross_layers: usize,
    pub partitions: usize,
    pub clusters: usize,
    pub top_k: usize,
    pub renormalize_top_k: bool,
    /// When false the retrieval block is fixed at zero and no routing runs.
    pub use_memory: bool,
    pub bank: BankInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            temporal: TemporalConfig::default(),
            d_t: 16,
            d_u: 4,
            d_m: 16,
            width: 32,
            head_hidden: 32,
            cross_layers: 2,
            partitions: 6,
            clusters: 4,
            top_k: 3,
            renormalize_top_k: false,
            use_memory: true,
            bank: BankInit::default(),
        }
    }
}

impl ModelConfig {
    pub fn query_width(&self) -> usize {
        self.temporal.d_v + self.d_t + self.d_u
    }

    pub fn validate(&self) -> Result<()> {
        self.temporal.ssm.validate()?;
        let widths = [
            ("d_v", self.temporal.d_v),
            ("d_t", self.d_t),
            ("d_u", self.d_u),
            ("d_m", self.d_m),
            ("width", self.width),
            ("head_hidden", self.head_hidden),
            ("partitions", self.partitions),
            ("clusters", self.clusters),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(StapError::invalid(format!("{name} must be positive")));
        }
        let slots = self.partitions * self.clusters;
        if self.top_k == 0 || self.top_k > slots {
            return Err(StapError::invalid(format!(
                "top_k must lie in [1, {slots}], got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Weights of the composite objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub lambda_pref: f64,
    pub lambda_bal: f64,
    pub balance: BalanceConfig,
    pub dppo_gamma: f64,
    /// Preference pairs need a label gap above this multiple of the batch std.
    pub pair_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_delta: 1.0,
            lambda_pref: 0.1,
            lambda_bal: 1.0,
            balance: BalanceConfig::default(),
            dppo_gamma: 0.5,
            pair_margin: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub pref: f64,
    pub balance: f64,
    pub lambda_pref: f64,
    pub lambda_bal: f64,
}

/// Mean Huber regression loss plus weighted preference and balance terms.
pub fn total_loss(
    preds: &[f64],
    labels: &[f64],
    pref: f64,
    balance: f64,
    lambda_pref: f64,
    lambda_bal: f64,
    delta: f64,
) -> Result<LossBreakdown> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(StapError::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let reg = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| huber(p - y, delta))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(LossBreakdown {
        total: reg + lambda_pref * pref + lambda_bal * balance,
        reg,
        pref,
        balance,
        lambda_pref,
        lambda_bal,
    })
}

/// Gradients for every trainable quantity of a [`StapModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    /// Aligned with the parameter store.
    pub params: Vec<Tensor>,
    pub slots: Tensor,
    pub tau: f64,
}

impl ModelGrads {
    fn zeros(model: &StapModel) -> Self {
        ModelGrads {
            params: model.store.grad_buffers(),
            slots: model.bank.slots.value.zeros_like(),
            tau: 0.0,
        }
    }

    fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.axpy(1.0, b);
        }
        self.slots.axpy(1.0, &other.slots);
        self.tau += other.tau;
    }

    /// Flat view in canonical order: store parameters, bank slots, τ.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .params
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        out.extend_from_slice(self.slots.data());
        out.push(self.tau);
        out
    }
}

/// Everything an item's backward pass needs from its forward pass.
pub(crate) struct ItemTrace {
    pub temporal: TemporalOutput,
    temporal_cache: TemporalCache,
    pub route: Option<(RoutingResult, RouteCache, Vec<f64>)>,
    cross_cache: cross::CrossCache,
    head_cache: head::HeadCache,
    pub prediction: f64,
}

/// Per-item forward result exposed for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub frame_weights: Vec<f64>,
    pub routing: Option<RoutingResult>,
}

#[derive(Clone, Debug)]
pub struct StapModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub temporal: TemporalBlock,
    pub w_q: ParamId,
    pub cross: CrossAttention,
    pub head: PredictionHead,
    pub bank: MemoryBank,
}

impl StapModel {
    /// Builds parameters from `seed`, seeds the bank from the training items'
    /// projected queries and sets the output bias to the mean training label.
    pub fn new(cfg: ModelConfig, train: &[&Sample], seed: u64) -> Result<Self> {
        cfg.validate()?;
        validate_batch(train)?;
        let first = train[0];
        if first.frames.dim() != cfg.temporal.d_v
            || first.text.cols() != cfg.d_t
            || first.meta.len() != cfg.d_u
        {
            return Err(StapError::shape(format!(
                "samples have widths (d_v {}, d_t {}, d_u {}), model expects ({}, {}, {})",
                first.frames.dim(),
                first.text.cols(),
                first.meta.len(),
                cfg.temporal.d_v,
                cfg.d_t,
                cfg.d_u
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let temporal = TemporalBlock::new(&mut store, cfg.temporal.clone(), &mut rng)?;
        let qw = cfg.query_width();
        let w_q = store.add(
            "memory.w_q",
            Tensor::uniform(&[cfg.d_m, qw], 1.0 / (qw as f64).sqrt(), &mut rng),
        );
        let cross = CrossAttention::new(
            &mut store,
            cfg.temporal.d_v,
            cfg.d_t,
            cfg.width,
            cfg.cross_layers,
            &mut rng,
        );
        let head = PredictionHead::new(
            &mut store,
            cfg.d_u,
            cfg.d_m,
            cfg.width,
            cfg.head_hidden,
            &mut rng,
        );
        let mean_label = train.iter().map(|s| s.label).sum::<f64>() / train.len() as f64;
        store.value_mut(head.b2).data_mut()[0] = mean_label;

        let queries: Vec<Vec<f64>> = train
            .par_iter()
            .map(|s| {
                let out = temporal.forward(&s.frames, &store)?;
                project_query(&routing_query(&out.pooled, s), store.value(w_q))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<f64> = train.iter().map(|s| s.label).collect();
        let bank = init_bank_with(
            &Tensor::from_rows(&queries)?,
            &labels,
            cfg.partitions,
            cfg.clusters,
            seed,
            &cfg.bank,
        )?;
        Ok(StapModel {
            cfg,
            store,
            temporal,
            w_q,
            cross,
            head,
            bank,
        })
    }

    /// Total number of scalar trainables (store, slots, τ).
    pub fn parameter_count(&self) -> usize {
        self.store.iter().map(|p| p.value.len()).sum::<usize>() + self.bank.slots.value.len() + 1
    }

    pub(crate) fn forward_item(&self, s: &Sample) -> Result<ItemTrace> {
        let (temporal, temporal_cache) = self.temporal.forward_cached(&s.frames, &self.store)?;
        let route = if self.cfg.use_memory {
            let query = routing_query(&temporal.pooled, s);
            let (r, c) = route_cached(
                &query,
                &self.bank,
                self.store.value(self.w_q),
                self.cfg.top_k,
                self.cfg.renormalize_top_k,
            )?;
            Some((r, c, query))
        } else {
            None
        };
        let (cross, cross_cache) =
            self.cross
                .forward_cached(&temporal.v_seq, &s.text, &self.store)?;
        let retrieval = route
            .as_ref()
            .map(|(r, _, _)| (r.z_aug.as_slice(), r.c_pop));
        let (prediction, head_cache) = self.head.forward_cached(
            &cross.visual,
            &cross.text,
            &s.meta,
            retrieval,
            &self.store,
        )?;
        Ok(ItemTrace {
            temporal,
            temporal_cache,
            route,
            cross_cache,
            head_cache,
            prediction,
        })
    }

    pub(crate) fn backward_item(
        &self,
        s: &Sample,
        trace: &ItemTrace,
        grad_pred: f64,
        grad_soft: Option<&[f64]>,
    ) -> ModelGrads {
        let mut g = ModelGrads::zeros(self);
        let hg = self.head.backward(
            &s.meta,
            &self.store,
            &trace.head_cache,
            grad_pred,
            &mut g.params,
        );
        let grad_seq = self.cross.backward(
            &trace.temporal.v_seq,
            &s.text,
            &self.store,
            &trace.cross_cache,
            &hg.visual,
            &hg.text,
            &mut g.params,
        );
        let mut grad_pooled = vec![0.0; self.cfg.temporal.d_v];
        if let Some((result, cache, query)) = &trace.route {
            let zeros;
            let gs = match grad_soft {
                Some(gs) => gs,
                None => {
                    zeros = vec![0.0; self.bank.slot_count()];
                    &zeros
                }
            };
            let rg = route_backward(
                query,
                &self.bank,
                self.store.value(self.w_q),
                result,
                cache,
                &hg.z_aug,
                hg.c_pop,
                gs,
            );
            g.params[self.w_q.index()].axpy(1.0, &rg.w_q);
            let d_v = grad_pooled.len();
            add_into(&mut grad_pooled, &rg.query[..d_v]);
            g.slots = rg.slots;
            g.tau = rg.tau;
        }
        self.temporal.backward(
            &s.frames,
            &self.store,
            &trace.temporal,
            &trace.temporal_cache,
            &grad_seq,
            &grad_pooled,
            &mut g.params,
        );
        g
    }

    pub fn predict_one(&self, s: &Sample) -> Result<Prediction> {
        let t = self.forward_item(s)?;
        Ok(Prediction {
            value: t.prediction,
            frame_weights: t.temporal.scores.weights.clone(),
            routing: t.route.map(|(r, _, _)| r),
        })
    }

    /// Predictions for many items, computed in parallel, in input order.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        samples
            .par_iter()
            .map(|s| self.forward_item(s).map(|t| t.prediction))
            .collect()
    }

    /// With one slot routing is constant, so the query projection and τ
    /// cannot influence the output.
    fn single_slot(&self) -> bool {
        self.cfg.partitions * self.cfg.clusters == 1
    }

    /// Names of parameters that the current configuration never touches.
    pub fn inactive_parameters(&self) -> Vec<String> {
        let t = &self.cfg.temporal;
        self.store
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| {
                (!self.cfg.use_memory && (n == "memory.w_q" || n == "head.w_r" || n == "head.b_r"))
                    || (self.single_slot() && n == "memory.w_q")
                    || (!t.use_ssm && n.starts_with("temporal.ssm."))
                    || (!t.use_sparse_attn && n.starts_with("temporal.attn."))
                    || (!t.use_frame_scoring
                        && ["w1", "b1", "w2", "b2"]
                            .iter()
                            .any(|s| *n == format!("temporal.score.{s}")))
            })
            .collect()
    }

    /// Adds `delta` to one coordinate of the canonical flat parameter vector.
    pub fn perturb(&mut self, coord: usize, delta: f64) -> Result<()> {
        let mut c = coord;
        for p in self.store.iter_mut() {
            if c < p.value.len() {
                p.value.data_mut()[c] += delta;
                return Ok(());
            }
            c -= p.value.len();
        }
        if c < self.bank.slots.value.len() {
            self.bank.slots.value.data_mut()[c] += delta;
            return Ok(());
        }
        if c == self.bank.slots.value.len() {
            let t = self.bank.temperature();
            self.bank.tau.value.data_mut()[0] = t + delta;
            return Ok(());
        }
        Err(StapError::invalid(format!(
            "coordinate {coord} out of range"
        )))
    }

    /// Name of the tensor that owns a flat coordinate.
    pub fn coordinate_owner(&self, coord: usize) -> String {
        let mut c = coord;
        for p in self.store.iter() {
            if c < p.value.len() {
                return p.name.clone();
            }
            c -= p.value.len();
        }
        if c < self.bank.slots.value.len() {
            "memory.slots".into()
        } else {
            "memory.tau".into()
        }
    }
}

/// `[V; mean(text tokens); U]`.
pub fn routing_query(pooled: &[f64], s: &Sample) -> Vec<f64> {
    let mut q = pooled.to_vec();
    let l = s.text.rows() as f64;
    let mut t = vec![0.0; s.text.cols()];
    for i in 0..s.text.rows() {
        add_into(&mut t, s.text.row(i));
    }
    q.extend(t.iter().map(|v| v / l));
    q.extend_from_slice(&s.meta);
    q
}

/// Forward pass, objective and gradients for one batch.
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    pub grads: ModelGrads,
    pub predictions: Vec<f64>,
    pub routes: Vec<RoutingResult>,
}

fn batch_terms(
    model: &StapModel,
    batch: &[&Sample],
    loss: &LossConfig,
    traces: &[ItemTrace],
) -> Result<(LossBreakdown, Vec<f64>, Vec<Vec<f64>>)> {
    let n = batch.len();
    let preds: Vec<f64> = traces.iter().map(|t| t.prediction).collect();
    if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
        return Err(StapError::NonFinite {
            tensor: format!("prediction[{i}]"),
        });
    }
    let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();
    let grad_pred: Vec<f64> = preds
        .iter()
        .zip(&labels)
        .map(|(p, y)| huber_grad(p - y, loss.huber_delta) / n as f64)
        .collect();
    let slots = model.bank.slot_count();
    let mut grad_soft = vec![vec![0.0; slots]; n];
    let (mut pref, mut balance) = (0.0, 0.0);
    if model.cfg.use_memory {
        let soft: Vec<&[f64]> = traces
            .iter()
            .map(|t| {
                t.route
                    .as_ref()
                    .expect("routing runs with memory")
                    .0
                    .soft
                    .data()
            })
            .collect();
        let bal = load_balance_loss(
            &soft,
            model.cfg.partitions,
            model.cfg.clusters,
            &loss.balance,
        )?;
        balance = bal.value;
        for (g, b) in grad_soft.iter_mut().zip(&bal.grads) {
            g.iter_mut()
                .zip(b)
                .for_each(|(a, v)| *a += loss.lambda_bal * v);
        }
        if loss.lambda_pref != 0.0 {
            let pairs = form_pairs(&labels, loss.pair_margin);
            let rows: Vec<(&[f64], &[f64])> =
                pairs.iter().map(|&(a, b)| (soft[a], soft[b])).collect();
            let d = dppo_loss(&rows, loss.dppo_gamma)?;
            pref = d.value;
            for (&(a, b), (ga, gb)) in pairs.iter().zip(&d.grads) {
                grad_soft[a]
                    .iter_mut()
                    .zip(ga)
                    .for_each(|(x, v)| *x += loss.lambda_pref * v);
                grad_soft[b]
                    .iter_mut()
                    .zip(gb)
                    .for_each(|(x, v)| *x += loss.lambda_pref * v);
            }
        }
    }
    let breakdown = total_loss(
        &preds,
        &labels,
        pref,
        balance,
        loss.lambda_pref,
        loss.lambda_bal,
        loss.huber_delta,
    )?;
    for (name, v) in [
        ("loss.reg", breakdown.reg),
        ("loss.pref", breakdown.pref),
        ("loss.balance", breakdown.balance),
        ("loss.total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(StapError::NonFinite {
                tensor: name.into(),
            });
        }
    }
    Ok((breakdown, grad_pred, grad_soft))
}

/// Objective only; used by finite-difference checks.
pub fn batch_loss(
    model: &StapModel,
    batch: &[&Sample],
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    validate_batch(batch)?;
    let traces: Vec<ItemTrace> = batch
        .par_iter()
        .map(|s| model.forward_item(s))
        .collect::<Result<_>>()?;
    batch_terms(model, batch, loss, &traces).map(|(b, _, _)| b)
}

/// Objective and gradients. Items run in parallel; per-item gradients are
/// reduced in batch order so results do not depend on thread count.
pub fn evaluate_batch(
    model: &StapModel,
    batch: &[&Sample],
    loss: &LossConfig,
) -> Result<BatchEvaluation> {
    validate_batch(batch)?;
    let traces: Vec<ItemTrace> = batch
        .par_iter()
        .map(|s| model.forward_item(s))
        .collect::<Result<_>>()?;
    let (breakdown, grad_pred, grad_soft) = batch_terms(model, batch, loss, &traces)?;
    let use_soft = model.cfg.use_memory;
    let per_item: Vec<ModelGrads> = batch
        .par_iter()
        .zip(traces.par_iter())
        .enumerate()
        .map(|(i, (s, t))| {
            model.backward_item(
                s,
                t,
                grad_pred[i],
                use_soft.then_some(grad_soft[i].as_slice()),
            )
        })
        .collect();
    let mut grads = ModelGrads::zeros(model);
    for g in &per_item {
        grads.add(g);
    }
    for (p, g) in model.store.iter().zip(&grads.params) {
        if !g.is_finite() {
            return Err(StapError::NonFinite {
                tensor: format!("grad({})", p.name),
            });
        }
    }
    if !grads.slots.is_finite() {
        return Err(StapError::NonFinite {
            tensor: "grad(memory.slots)".into(),
        });
    }
    if !grads.tau.is_finite() {
        return Err(StapError::NonFinite {
            tensor: "grad(memory.tau)".into(),
        });
    }
    let predictions = traces.iter().map(|t| t.prediction).collect();
    let routes = traces
        .into_iter()
        .filter_map(|t| t.route.map(|(r, _, _)| r))
        .collect();
    Ok(BatchEvaluation {
        loss: breakdown,
        grads,
        predictions,
        routes,
    })
}

/// Active parameters whose gradient is identically zero on `batch`.
pub fn dead_parameters(
    model: &StapModel,
    batch: &[&Sample],
    loss: &LossConfig,
) -> Result<Vec<String>> {
    let eval = evaluate_batch(model, batch, loss)?;
    let inactive = model.inactive_parameters();
    let mut dead: Vec<String> = model
        .store
        .iter()
        .zip(&eval.grads.params)
        .filter(|(p, g)| g.max_abs() == 0.0 && !inactive.contains(&p.name))
        .map(|(p, _)| p.name.clone())
        .collect();
    if model.cfg.use_memory {
        if eval.grads.slots.max_abs() == 0.0 {
            dead.push("memory.slots".into());
        }
        if eval.grads.tau == 0.0 && !model.single_slot() {
            dead.push("memory.tau".into());
        }
    }
    Ok(dead)
}

impl StapModel {
    /// Canonical flat parameter vector (store, slots, τ).
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .store
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        out.extend_from_slice(self.bank.slots.value.data());
        out.push(self.bank.temperature());
        out
    }
}

/// Central-difference check of the batch objective's gradient with respect to
/// every trainable coordinate, or a seeded sample of `cfg.probes` of them.
pub fn model_grad_check(
    model: &StapModel,
    batch: &[&Sample],
    loss: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = evaluate_batch(model, batch, loss)?.grads.flatten();
    let base = model.flat_values();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = probe_coordinates(base.len(), cfg.probes, &mut rng);
    let mut work = model.clone();
    compare_at("model", &analytic, &base, &coords, cfg, |c, x| {
        work.perturb(c, x - base[c])?;
        let v = batch_loss(&work, batch, loss).map(|b| b.total);
        work.perturb(c, base[c] - x)?;
        v
    })
}
