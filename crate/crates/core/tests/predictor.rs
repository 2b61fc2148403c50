use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stap_core::checks::{end_to_end_check, tiny_setup};
use stap_core::numerics::gradcheck::relative_error;
use stap_core::numerics::{GradCheckConfig, ParamStore, Tensor};
use stap_core::predictor::{
    batch_loss, cross_attention, dead_parameters, evaluate_batch, fit, load_checkpoint,
    save_checkpoint, total_loss, train_step, CrossAttention, LossConfig, ModelConfig, Sample,
    StapModel, TrainConfig,
};
use stap_core::synth::{generate_corpus, Corpus, SynthConfig};
use stap_core::temporal::FrameSequence;
use stap_core::StapError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn ref_layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn ref_mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let c = w.shape()[1];
    w.data()
        .chunks(c)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn tiny(top_k: usize) -> (Corpus, StapModel) {
    let (synth, mut cfg) = tiny_setup();
    cfg.top_k = top_k;
    let corpus = generate_corpus(&synth).unwrap();
    let items: Vec<&Sample> = corpus.samples.iter().map(|s| &s.sample).collect();
    let model = StapModel::new(cfg, &items, 3).unwrap();
    (corpus, model)
}

fn all_items(corpus: &Corpus) -> Vec<&Sample> {
    corpus.samples.iter().map(|s| &s.sample).collect()
}

/// Steps each layer's state with a singleton softmax: `LN(state + W_v token)`.
fn singleton_chain(store: &ParamStore, stream: &str, layers: usize, token: &[f64]) -> Vec<f64> {
    let mut state = token.to_vec();
    for l in 0..layers {
        let wv = store.value(store.find(&format!("cross.l{l}.{stream}.wv")).unwrap());
        let pre: Vec<f64> = state
            .iter()
            .zip(ref_mv(wv, token))
            .map(|(a, b)| a + b)
            .collect();
        state = ref_layer_norm(&pre);
    }
    state
}

// ---- cross attention ----

#[test]
fn single_text_token_ignores_the_visual_query() {
    let mut store = ParamStore::new();
    let block = CrossAttention::new(&mut store, 5, 3, 6, 2, &mut rng(1));
    let mut r = rng(2);
    let text = random_tensor(1, 3, &mut r);
    let token = ref_mv(store.value(block.proj_t), text.row(0));
    let expect = singleton_chain(&store, "text", 2, &token);
    for _ in 0..5 {
        let visual = random_tensor(7, 5, &mut r);
        let out = cross_attention(&visual, &text, &block, &store).unwrap();
        for (a, e) in out.text.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn identical_visual_tokens_collapse_to_the_common_value() {
    let mut store = ParamStore::new();
    let block = CrossAttention::new(&mut store, 4, 3, 5, 2, &mut rng(3));
    let mut r = rng(4);
    let frame: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let visual = Tensor::from_rows(&vec![frame.clone(); 6]).unwrap();
    let token = ref_mv(store.value(block.proj_v), &frame);
    let expect = singleton_chain(&store, "visual", 2, &token);
    for _ in 0..5 {
        let text = random_tensor(4, 3, &mut r);
        let out = cross_attention(&visual, &text, &block, &store).unwrap();
        for (a, e) in out.visual.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn default_model_has_two_cross_layers() {
    let (corpus, _) = tiny(4);
    let cfg = ModelConfig {
        temporal: tiny_setup().1.temporal,
        d_t: 4,
        d_u: 2,
        partitions: 2,
        clusters: 2,
        top_k: 2,
        ..ModelConfig::default()
    };
    let model = StapModel::new(cfg, &all_items(&corpus), 0).unwrap();
    assert_eq!(model.cross.layer_count(), 2);
}

#[test]
fn cross_attention_rejects_wrong_widths() {
    let mut store = ParamStore::new();
    let block = CrossAttention::new(&mut store, 4, 3, 5, 1, &mut rng(5));
    let mut r = rng(6);
    let bad = random_tensor(2, 4, &mut r);
    assert!(cross_attention(&random_tensor(3, 4, &mut r), &bad, &block, &store).is_err());
}

// ---- prediction head ----

#[test]
fn zero_retrieval_reduces_to_the_plain_pathway() {
    let (corpus, mut model) = tiny(2);
    let w_r = model.head.w_r;
    let b_r = model.head.b_r;
    model.store.value_mut(w_r).fill(0.0);
    model.store.value_mut(b_r).fill(-1.0);
    let mut plain = model.clone();
    plain.cfg.use_memory = false;
    for s in all_items(&corpus) {
        let a = model.predict_one(s).unwrap();
        let b = plain.predict_one(s).unwrap();
        assert!(a.value.is_finite());
        assert_eq!(a.value, b.value);
        assert!(a.routing.is_some() && b.routing.is_none());
    }
}

#[test]
fn head_input_is_six_blocks_wide() {
    let (_, model) = tiny(2);
    let w1 = model.store.value(model.head.w1);
    assert_eq!(w1.cols(), 6 * model.cfg.width);
}

// ---- objective ----

#[test]
fn disabled_terms_leave_huber_only() {
    let preds = [0.5, 2.0, -1.0, 3.5];
    let labels = [0.0, 0.2, -1.1, 1.0];
    let b = total_loss(&preds, &labels, 0.8, 0.3, 0.0, 0.0, 1.0).unwrap();
    let huber = |r: f64| {
        if r.abs() <= 1.0 {
            0.5 * r * r
        } else {
            r.abs() - 0.5
        }
    };
    let expect = preds
        .iter()
        .zip(&labels)
        .map(|(p, y)| huber(p - y))
        .sum::<f64>()
        / 4.0;
    assert!((b.total - expect).abs() < 1e-15);
    assert_eq!(b.reg, b.total);
}

#[test]
fn composite_of_trivial_terms_is_weighted_ln2() {
    let labels = [1.0, 2.0, 3.0];
    let b = total_loss(&labels, &labels, std::f64::consts::LN_2, 0.0, 0.1, 1.0, 1.0).unwrap();
    assert!((b.total - 0.1 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn total_loss_rejects_misaligned_inputs() {
    assert!(matches!(
        total_loss(&[1.0], &[1.0, 2.0], 0.0, 0.0, 0.1, 1.0, 1.0),
        Err(StapError::Shape(_))
    ));
    assert!(total_loss(&[], &[], 0.0, 0.0, 0.1, 1.0, 1.0).is_err());
}

#[test]
fn batch_breakdown_is_additive() {
    let (corpus, model) = tiny(2);
    let loss = LossConfig::default();
    let b = batch_loss(&model, &all_items(&corpus), &loss).unwrap();
    assert_eq!(
        b.total,
        b.reg + b.lambda_pref * b.pref + b.lambda_bal * b.balance
    );
    assert!(b.balance >= 0.0 && b.pref > 0.0);
}

// ---- training ----

fn small_corpus(samples: usize) -> (SynthConfig, ModelConfig) {
    let (mut synth, model) = tiny_setup();
    synth.samples = samples;
    synth.frames = 8;
    (synth, model)
}

#[test]
fn ten_steps_are_bit_identical_across_runs() {
    let (synth, cfg) = small_corpus(32);
    let run = || {
        let corpus = generate_corpus(&synth).unwrap();
        let items = corpus.train_items();
        let mut model = StapModel::new(cfg.clone(), &items, 11).unwrap();
        let train = TrainConfig {
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let h = fit(&mut model, &items, &LossConfig::default(), &train, Some(10)).unwrap();
        (h.totals(), model.flat_values())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn fifty_steps_reduce_the_training_loss() {
    let (synth, cfg) = small_corpus(64);
    let corpus = generate_corpus(&synth).unwrap();
    let items = all_items(&corpus);
    let mut model = StapModel::new(cfg, &items, 5).unwrap();
    let train = TrainConfig {
        batch_size: 64,
        learning_rate: 0.05,
        seed: 5,
        ..TrainConfig::default()
    };
    let loss = LossConfig::default();
    let mut totals = Vec::new();
    for step in 0..50 {
        totals.push(
            train_step(&mut model, &items, &loss, &train, step)
                .unwrap()
                .loss
                .total,
        );
    }
    assert!(totals[49] < totals[0], "{} vs {}", totals[49], totals[0]);
}

#[test]
fn every_active_parameter_receives_gradient() {
    let (corpus, model) = tiny(2);
    let dead = dead_parameters(&model, &all_items(&corpus), &LossConfig::default()).unwrap();
    assert!(dead.is_empty(), "{dead:?}");
}

#[test]
fn ablated_parameters_are_reported_inactive() {
    let (corpus, mut model) = tiny(2);
    model.cfg.use_memory = false;
    let inactive = model.inactive_parameters();
    assert!(inactive.contains(&"memory.w_q".to_string()));
    assert!(
        dead_parameters(&model, &all_items(&corpus), &LossConfig::default())
            .unwrap()
            .is_empty()
    );
}

// ---- gradients ----

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let gc = GradCheckConfig {
        tol: 1e-3,
        ..GradCheckConfig::default()
    };
    let report = end_to_end_check(&gc).unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.probes >= 20);
}

#[test]
fn non_routing_gradients_match_with_partial_top_k() {
    let (corpus, model) = tiny(2);
    let items = all_items(&corpus);
    let loss = LossConfig::default();
    let analytic = evaluate_batch(&model, &items, &loss)
        .unwrap()
        .grads
        .flatten();
    let base = model.flat_values();
    let coords: Vec<usize> = (0..base.len())
        .filter(|&c| {
            let owner = model.coordinate_owner(c);
            owner.starts_with("cross.") || owner.starts_with("head.")
        })
        .step_by(7)
        .collect();
    assert!(coords.len() >= 20);
    let h = 1e-6;
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for &c in &coords {
        work.perturb(c, h).unwrap();
        let up = batch_loss(&work, &items, &loss).unwrap().total;
        work.perturb(c, -2.0 * h).unwrap();
        let down = batch_loss(&work, &items, &loss).unwrap().total;
        work.perturb(c, h).unwrap();
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[c], numeric, 1e-3));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn identical_text_tokens_make_order_irrelevant() {
    let (corpus, model) = tiny(2);
    let mut r = rng(7);
    for s in all_items(&corpus) {
        let token: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut a = s.clone();
        a.text = Tensor::from_rows(&vec![token.clone(); 3]).unwrap();
        let mut b = a.clone();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| b.text.row(i).to_vec()).collect();
        rows.reverse();
        b.text = Tensor::from_rows(&rows).unwrap();
        assert_eq!(
            model.predict_one(&a).unwrap().value,
            model.predict_one(&b).unwrap().value
        );
    }
}

// ---- persistence and diagnostics ----

#[test]
fn checkpoint_roundtrip_restores_predictions() {
    let (corpus, model) = tiny(2);
    let items = all_items(&corpus);
    let mut buf = Vec::new();
    save_checkpoint(&model, &mut buf).unwrap();
    let (_, mut fresh) = tiny(2);
    fresh.store.iter_mut().for_each(|p| p.value.fill(0.0));
    load_checkpoint(&mut fresh, &mut buf.as_slice()).unwrap();
    assert_eq!(
        fresh.predict(&items).unwrap(),
        model.predict(&items).unwrap()
    );
    assert_eq!(fresh.flat_values(), model.flat_values());

    buf.truncate(buf.len() / 2);
    assert!(matches!(
        load_checkpoint(&mut fresh, &mut buf.as_slice()),
        Err(StapError::Format(_))
    ));
    assert!(load_checkpoint(&mut fresh, &mut &b"NOTACKPT"[..]).is_err());
}

#[test]
fn non_finite_inputs_are_named() {
    let (corpus, model) = tiny(2);
    let mut items: Vec<Sample> = all_items(&corpus).into_iter().cloned().collect();
    let mut frames = items[0].frames.tensor().clone();
    frames.data_mut()[0] = f64::NAN;
    items[0].frames = FrameSequence::new(frames).unwrap();
    let refs: Vec<&Sample> = items.iter().collect();
    match evaluate_batch(&model, &refs, &LossConfig::default()) {
        Err(StapError::NonFinite { tensor }) => assert!(!tensor.is_empty()),
        other => panic!(
            "expected a non-finite error, got {:?}",
            other.map(|e| e.loss)
        ),
    }
}

#[test]
fn malformed_batches_are_rejected() {
    let (corpus, model) = tiny(2);
    let loss = LossConfig::default();
    assert!(batch_loss(&model, &[], &loss).is_err());
    let mut s = corpus.samples[0].sample.clone();
    s.label = f64::INFINITY;
    assert!(matches!(
        batch_loss(&model, &[&s], &loss),
        Err(StapError::Data(_))
    ));
    let mut t = corpus.samples[0].sample.clone();
    t.meta.push(0.0);
    let first = &corpus.samples[1].sample;
    assert!(matches!(
        batch_loss(&model, &[first, &t], &loss),
        Err(StapError::Shape(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let (corpus, cfg) = tiny(2);
    let items = all_items(&corpus);
    let mut bad = cfg.cfg.clone();
    bad.top_k = 9;
    assert!(matches!(
        StapModel::new(bad, &items, 0),
        Err(StapError::InvalidArgument(_))
    ));
    let train = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    let mut model = cfg.clone();
    assert!(fit(&mut model, &items, &LossConfig::default(), &train, None).is_err());
}
