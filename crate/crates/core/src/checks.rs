//! Finite-difference checks of the composite blocks and of the whole model.
//!
//! Each block is reduced to a scalar with fixed random projections of its
//! outputs, then the analytic backward pass is compared against central
//! differences over parameters and differentiable inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::gradcheck::{compare_at, probe_coordinates, GradCheckConfig, GradCheckReport};
use crate::numerics::tensor::{dot, Tensor};
use crate::numerics::ParamStore;
use crate::predictor::{model_grad_check, CrossAttention, ModelConfig, PredictionHead, StapModel};
use crate::spatial::bank::MemoryBank;
use crate::spatial::losses::{dppo_loss, load_balance_loss, BalanceConfig};
use crate::spatial::routing::{route_backward, route_cached};
use crate::synth::{generate_corpus, spaced_bases, SynthConfig};
use crate::temporal::{DeltaMode, FrameSequence, TemporalBlock, TemporalConfig};

fn normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal(n, rng)).expect("shape matches data")
}

fn simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn flat_store(store: &ParamStore) -> Vec<f64> {
    store
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect()
}

fn flat_grads(grads: &[Tensor]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect()
}

/// Sets flat coordinate `c` of the store; returns the leftover index when the
/// coordinate lies past the store.
fn set_store(store: &mut ParamStore, mut c: usize, x: f64) -> Option<usize> {
    for p in store.iter_mut() {
        if c < p.value.len() {
            p.value.data_mut()[c] = x;
            return None;
        }
        c -= p.value.len();
    }
    Some(c)
}

/// A short random walk with one large jump, so scores and windows vary.
fn frames(t_len: usize, d_v: usize, rng: &mut impl Rng) -> FrameSequence {
    let mut rows = Vec::with_capacity(t_len);
    let mut x = normal(d_v, rng);
    for t in 0..t_len {
        if t > 0 {
            let scale = if t == t_len / 2 { 1.5 } else { 0.2 };
            for (v, n) in x.iter_mut().zip(normal(d_v, rng)) {
                *v += scale * n;
            }
        }
        rows.push(x.clone());
    }
    FrameSequence::new(Tensor::from_rows(&rows).expect("rows share width")).expect("non-empty")
}

/// Temporal block gradients with respect to every temporal parameter.
pub fn temporal_check(
    name: &str,
    tcfg: TemporalConfig,
    t_len: usize,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut store = ParamStore::new();
    let d_v = tcfg.d_v;
    let block = TemporalBlock::new(&mut store, tcfg, &mut rng)?;
    let seq = frames(t_len, d_v, &mut rng);
    let p_seq = normal_tensor(&[t_len, d_v], &mut rng);
    let p_pool = normal(d_v, &mut rng);
    let objective = |s: &ParamStore| -> Result<f64> {
        let out = block.forward(&seq, s)?;
        Ok(dot(out.v_seq.data(), p_seq.data()) + dot(&out.pooled, &p_pool))
    };

    let (out, cache) = block.forward_cached(&seq, &store)?;
    let mut grads = store.grad_buffers();
    block.backward(&seq, &store, &out, &cache, &p_seq, &p_pool, &mut grads);
    let analytic = flat_grads(&grads);
    let base = flat_store(&store);
    let coords = probe_coordinates(base.len(), gc.probes, &mut rng);
    let mut work = store.clone();
    compare_at(name, &analytic, &base, &coords, gc, |c, x| {
        set_store(&mut work, c, x);
        let v = objective(&work);
        set_store(&mut work, c, base[c]);
        v
    })
}

/// Routing gradients with respect to the query, `W_q`, the slots and τ.
pub fn route_check(k: usize, renormalize: bool, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (p, c, d_m, d_q) = (3, 2, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let query = normal(d_q, &mut rng);
    let w_q = normal_tensor(&[d_m, d_q], &mut rng);
    let slots = normal_tensor(&[p, c, d_m], &mut rng);
    let centroids = normal_tensor(&[p, c], &mut rng);
    let g_z = normal(d_m, &mut rng);
    let g_c: f64 = rng.sample(StandardNormal);
    let g_soft = normal(p * c, &mut rng);

    // flat layout: query, W_q, slots, τ
    let mut base = query.clone();
    base.extend_from_slice(w_q.data());
    base.extend_from_slice(slots.data());
    base.push(0.8);
    let (nq, nw, ns) = (d_q, d_m * d_q, p * c * d_m);
    let unpack = |v: &[f64]| -> Result<(Vec<f64>, Tensor, MemoryBank)> {
        let q = v[..nq].to_vec();
        let w = Tensor::new(vec![d_m, d_q], v[nq..nq + nw].to_vec())?;
        let m = Tensor::new(vec![p, c, d_m], v[nq + nw..nq + nw + ns].to_vec())?;
        let bank = MemoryBank::new(m, centroids.clone(), v[nq + nw + ns], 0.01, 100.0)?;
        Ok((q, w, bank))
    };
    let objective = |v: &[f64]| -> Result<f64> {
        let (q, w, bank) = unpack(v)?;
        let (r, _) = route_cached(&q, &bank, &w, k, renormalize)?;
        Ok(dot(&r.z_aug, &g_z) + g_c * r.c_pop + dot(r.soft.data(), &g_soft))
    };

    let (q, w, bank) = unpack(&base)?;
    let (r, cache) = route_cached(&q, &bank, &w, k, renormalize)?;
    let g = route_backward(&q, &bank, &w, &r, &cache, &g_z, g_c, &g_soft);
    let mut analytic = g.query;
    analytic.extend_from_slice(g.w_q.data());
    analytic.extend_from_slice(g.slots.data());
    analytic.push(g.tau);
    let coords = probe_coordinates(base.len(), gc.probes, &mut rng);
    let mut work = base.clone();
    let name = format!("route(k={k}, renormalize={renormalize})");
    compare_at(&name, &analytic, &base, &coords, gc, |i, x| {
        work[i] = x;
        let v = objective(&work);
        work[i] = base[i];
        v
    })
}

/// Cross-attention gradients with respect to parameters and the visual sequence.
pub fn cross_check(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (t_len, d_v, l, d_t, width) = (5, 4, 3, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut store = ParamStore::new();
    let cross = CrossAttention::new(&mut store, d_v, d_t, width, 2, &mut rng);
    let visual = normal_tensor(&[t_len, d_v], &mut rng);
    let text = normal_tensor(&[l, d_t], &mut rng);
    let a = normal(width, &mut rng);
    let b = normal(width, &mut rng);

    let (_, cache) = cross.forward_cached(&visual, &text, &store)?;
    let mut grads = store.grad_buffers();
    let g_visual = cross.backward(&visual, &text, &store, &cache, &a, &b, &mut grads);
    let mut analytic = flat_grads(&grads);
    analytic.extend_from_slice(g_visual.data());
    let mut base = flat_store(&store);
    base.extend_from_slice(visual.data());

    let coords = probe_coordinates(base.len(), gc.probes, &mut rng);
    let (mut work, mut vis) = (store.clone(), visual.clone());
    compare_at("cross_attention", &analytic, &base, &coords, gc, |c, x| {
        let set = |work: &mut ParamStore, vis: &mut Tensor, x: f64| {
            if let Some(i) = set_store(work, c, x) {
                vis.data_mut()[i] = x;
            }
        };
        set(&mut work, &mut vis, x);
        let v = cross
            .forward(&vis, &text, &work)
            .map(|o| dot(&o.visual, &a) + dot(&o.text, &b));
        set(&mut work, &mut vis, base[c]);
        v
    })
}

/// Prediction-head gradients with respect to parameters and all inputs.
pub fn head_check(with_retrieval: bool, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (d_u, d_m, width, hidden) = (3, 4, 5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut store = ParamStore::new();
    let head = PredictionHead::new(&mut store, d_u, d_m, width, hidden, &mut rng);
    let meta = normal(d_u, &mut rng);
    // inputs: visual, text, z, c
    let mut inputs = normal(2 * width + d_m + 1, &mut rng);
    inputs.iter_mut().for_each(|v| *v *= 0.7);
    let eval = |s: &ParamStore, inp: &[f64]| {
        let (v, rest) = inp.split_at(width);
        let (t, rest) = rest.split_at(width);
        let retrieval = with_retrieval.then(|| (&rest[..d_m], rest[d_m]));
        head.forward_cached(v, t, &meta, retrieval, s)
    };

    let (_, cache) = eval(&store, &inputs)?;
    let mut grads = store.grad_buffers();
    let hg = head.backward(&meta, &store, &cache, 1.0, &mut grads);
    let mut analytic = flat_grads(&grads);
    analytic.extend(hg.visual);
    analytic.extend(hg.text);
    if with_retrieval {
        analytic.extend(hg.z_aug);
        analytic.push(hg.c_pop);
    } else {
        analytic.extend(std::iter::repeat_n(0.0, d_m + 1));
    }
    let n_store = store.iter().map(|p| p.value.len()).sum::<usize>();
    let mut base = flat_store(&store);
    base.extend_from_slice(&inputs);

    let coords = probe_coordinates(base.len(), gc.probes, &mut rng);
    let (mut work, mut inp) = (store.clone(), inputs.clone());
    let name = if with_retrieval {
        "head"
    } else {
        "head(no retrieval)"
    };
    compare_at(name, &analytic, &base, &coords, gc, |c, x| {
        if c < n_store {
            set_store(&mut work, c, x);
        } else {
            inp[c - n_store] = x;
        }
        let v = eval(&work, &inp).map(|(y, _)| y);
        if c < n_store {
            set_store(&mut work, c, base[c]);
        } else {
            inp[c - n_store] = base[c];
        }
        v
    })
}

/// Load-balance gradient with respect to the soft routing rows.
///
/// Perturbed rows must still pass the distribution check, so the step is
/// capped at 1e-7.
pub fn balance_check(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (p, c, b) = (3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let cfg = BalanceConfig {
        gamma_lb: 0.7,
        beta_lb: 1.3,
        ..BalanceConfig::default()
    };
    let base: Vec<f64> = (0..b).flat_map(|_| simplex(p * c, &mut rng)).collect();
    let eval = |v: &[f64]| {
        let rows: Vec<&[f64]> = v.chunks(p * c).collect();
        load_balance_loss(&rows, p, c, &cfg)
    };
    let analytic: Vec<f64> = eval(&base)?.grads.concat();
    let coords = probe_coordinates(base.len(), gc.probes, &mut rng);
    let local = GradCheckConfig {
        step: gc.step.min(1e-7),
        ..gc.clone()
    };
    let mut work = base.clone();
    compare_at("load_balance", &analytic, &base, &coords, &local, |i, x| {
        work[i] = x;
        let v = eval(&work).map(|l| l.value);
        work[i] = base[i];
        v
    })
}

/// Pairwise preference gradient with respect to both rows of every pair.
pub fn dppo_check(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (n, pairs) = (6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let base: Vec<f64> = (0..2 * pairs).flat_map(|_| simplex(n, &mut rng)).collect();
    let eval = |v: &[f64]| {
        let rows: Vec<&[f64]> = v.chunks(n).collect();
        let pairs: Vec<(&[f64], &[f64])> = rows.chunks(2).map(|r| (r[0], r[1])).collect();
        dppo_loss(&pairs, 0.5)
    };
    let analytic: Vec<f64> = eval(&base)?
        .grads
        .into_iter()
        .flat_map(|(a, b)| a.into_iter().chain(b))
        .collect();
    let coords = probe_coordinates(base.len(), gc.probes, &mut rng);
    let mut work = base.clone();
    compare_at("dppo", &analytic, &base, &coords, gc, |i, x| {
        work[i] = x;
        let v = eval(&work).map(|l| l.value);
        work[i] = base[i];
        v
    })
}

fn small_temporal(d_v: usize) -> TemporalConfig {
    let mut t = TemporalConfig {
        d_v,
        score_hidden: 5,
        ..TemporalConfig::default()
    };
    t.ssm.d_h = 4;
    t.attn.d_a = 4;
    t
}

/// Every composite block at its own evaluation point.
pub fn block_suite(gc: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    out.push(temporal_check("temporal", small_temporal(6), 5, gc)?);

    let mut anchor = small_temporal(6);
    anchor.ssm.mode = DeltaMode::Anchor;
    anchor.ssm.alpha = 0.2;
    out.push(temporal_check("temporal(anchor delta)", anchor, 5, gc)?);

    // narrow windows so the neighborhoods are genuinely partial
    let mut sparse = small_temporal(4);
    sparse.attn.window_base = 1.0;
    sparse.attn.window_beta = 0.0;
    out.push(temporal_check("temporal(sparse windows)", sparse, 9, gc)?);

    let mut ssm_only = small_temporal(4);
    ssm_only.use_sparse_attn = false;
    out.push(temporal_check("temporal(ssm only)", ssm_only, 6, gc)?);

    let mut attn_only = small_temporal(4);
    attn_only.use_ssm = false;
    out.push(temporal_check(
        "temporal(attention only)",
        attn_only,
        6,
        gc,
    )?);

    out.push(route_check(6, false, gc)?);
    out.push(route_check(3, false, gc)?);
    out.push(route_check(3, true, gc)?);
    out.push(cross_check(gc)?);
    out.push(head_check(true, gc)?);
    out.push(head_check(false, gc)?);
    out.push(balance_check(gc)?);
    out.push(dppo_check(gc)?);
    Ok(out)
}

/// A small model configuration for end-to-end checks: T=4, d_v=4, a 2x2 bank
/// and K = P·C.
pub fn tiny_setup() -> (SynthConfig, ModelConfig) {
    let synth = SynthConfig {
        samples: 8,
        frames: 4,
        d_v: 4,
        d_t: 4,
        d_u: 2,
        topics: 2,
        highlights: 1,
        topic_base: spaced_bases(2, 1.0),
        ..SynthConfig::default()
    };
    let mut model = ModelConfig {
        temporal: small_temporal(4),
        d_t: 4,
        d_u: 2,
        d_m: 4,
        width: 8,
        head_hidden: 8,
        partitions: 2,
        clusters: 2,
        top_k: 4,
        ..ModelConfig::default()
    };
    model.temporal.score_hidden = 4;
    (synth, model)
}

/// Full objective (regression, preference and balance terms) against finite
/// differences over every trainable coordinate class.
pub fn end_to_end_check(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (synth, model_cfg) = tiny_setup();
    let corpus = generate_corpus(&synth)?;
    let items: Vec<_> = corpus.samples.iter().map(|s| &s.sample).collect();
    let model = StapModel::new(model_cfg, &items, gc.seed)?;
    model_grad_check(&model, &items, &crate::predictor::LossConfig::default(), gc)
}
