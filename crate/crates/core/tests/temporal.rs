#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stap_core::numerics::{ParamStore, Tensor};
use stap_core::temporal::{
    bidirectional_ssm, dense_attention, gated_fusion, score_frames, sparse_attention, ssm_scan,
    temporal_forward, DeltaMode, Direction, FrameScoreOutput, FrameScorer, FrameSequence,
    GatedFusion, SparseAttention, SparseAttnConfig, SsmBlock, SsmConfig, TemporalBlock,
    TemporalConfig,
};
use stap_core::StapError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_seq(t_len: usize, d_v: usize, rng: &mut impl Rng) -> FrameSequence {
    let data = (0..t_len * d_v)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FrameSequence::new(Tensor::new(vec![t_len, d_v], data).unwrap()).unwrap()
}

fn seq_from_rows(rows: &[Vec<f64>]) -> FrameSequence {
    FrameSequence::new(Tensor::from_rows(rows).unwrap()).unwrap()
}

// Independent reference helpers, written without the library kernels.

fn ref_layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ref_mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..r)
        .map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum())
        .collect()
}

fn ref_softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn flat_scores(t_len: usize, w: f64, d_v: usize) -> FrameScoreOutput {
    FrameScoreOutput {
        pre_scores: vec![0.0; t_len],
        weights: vec![w; t_len],
        anchor: vec![0.0; d_v],
    }
}

// ---- frame scoring ----

#[test]
fn constant_sequence_gives_equal_weights_and_normalized_anchor() {
    let mut store = ParamStore::new();
    let scorer = FrameScorer::new(&mut store, "s", 5, 8, &mut rng(1));
    let frame = vec![0.3, -1.2, 0.7, 2.0, 0.1];
    let seq = seq_from_rows(&vec![frame.clone(); 6]);
    let out = score_frames(&seq, &scorer, &store).unwrap();
    for w in &out.weights {
        assert_eq!(*w, out.weights[0]);
    }
    let expected: Vec<f64> = ref_layer_norm(&frame).iter().map(|v| v.tanh()).collect();
    for (a, e) in out.anchor.iter().zip(&expected) {
        assert!((a - e).abs() < 1e-9, "{a} vs {e}");
    }
}

#[test]
fn single_frame_weight_uses_bias_path_only() {
    let mut store = ParamStore::new();
    let scorer = FrameScorer::new(&mut store, "s", 4, 6, &mut rng(2));
    let frame = vec![1.0, -0.5, 0.25, 3.0];
    let seq = seq_from_rows(std::slice::from_ref(&frame));
    let out = score_frames(&seq, &scorer, &store).unwrap();
    let b1 = store.value(scorer.b1).data();
    let w2 = store.value(scorer.w2).data();
    let b2 = store.value(scorer.b2).data()[0];
    let u: f64 = b1
        .iter()
        .zip(w2)
        .map(|(b, w)| w * ref_gelu(*b))
        .sum::<f64>()
        + b2;
    let w = 1.0 / (1.0 + (-u).exp());
    assert!((out.weights[0] - w).abs() < 1e-12);
    let anchor: Vec<f64> = ref_layer_norm(&frame).iter().map(|v| v.tanh()).collect();
    for (a, e) in out.anchor.iter().zip(&anchor) {
        assert!((a - e).abs() < 1e-9);
    }
}

#[test]
fn planted_jump_has_highest_score() {
    let d_v = 4;
    for jump in 1..8 {
        let mut store = ParamStore::new();
        let scorer = FrameScorer::new(&mut store, "s", d_v, d_v, &mut rng(3));
        *store.value_mut(scorer.w1) = Tensor::identity(d_v);
        store.value_mut(scorer.b1).fill(0.0);
        store.value_mut(scorer.w2).fill(1.0);
        store.value_mut(scorer.b2).fill(0.0);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|t| vec![if t >= jump { 5.0 } else { 0.0 }; d_v])
            .collect();
        let out = score_frames(&seq_from_rows(&rows), &scorer, &store).unwrap();
        let argmax = out
            .pre_scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, jump);
    }
}

#[test]
fn scorer_rejects_wrong_frame_width() {
    let mut store = ParamStore::new();
    let scorer = FrameScorer::new(&mut store, "s", 4, 6, &mut rng(4));
    let seq = random_seq(3, 5, &mut rng(5));
    assert!(matches!(
        score_frames(&seq, &scorer, &store),
        Err(StapError::Shape(_))
    ));
}

// ---- SSM ----

#[test]
fn decay_free_ssm_integrates_frames() {
    let d = 3;
    let cfg = SsmConfig {
        d_h: d,
        delta_base: 1.0,
        alpha: 0.0,
        delta_max: 1.0,
        ..SsmConfig::default()
    };
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", d, cfg, &mut rng(6)).unwrap();
    store.value_mut(block.lambda_raw).fill(-60.0);
    *store.value_mut(block.b) = Tensor::identity(d);
    *store.value_mut(block.c) = Tensor::identity(d);
    store.value_mut(block.d).fill(0.0);
    let seq = random_seq(9, d, &mut rng(7));
    let scores = flat_scores(9, 0.5, d);
    let y = ssm_scan(&seq, &scores, &block, &store, Direction::Forward).unwrap();
    let mut acc = vec![0.0; d];
    for t in 0..9 {
        for k in 0..d {
            acc[k] += seq.frame(t)[k];
            assert!((y.at(t, k) - acc[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn score_mode_step_endpoints() {
    let cfg = SsmConfig {
        delta_base: 0.2,
        alpha: 1.5,
        delta_max: 1.0,
        mode: DeltaMode::Score,
        ..SsmConfig::default()
    };
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", 4, cfg, &mut rng(8)).unwrap();
    let seq = random_seq(2, 4, &mut rng(9));
    let mut scores = flat_scores(2, 0.0, 4);
    scores.weights = vec![1.0, 0.0];
    let steps = block.steps(&seq, &scores);
    assert!((steps.delta[0] - 0.2).abs() < 1e-15);
    assert!((steps.delta[1] - 0.2 * 2.5).abs() < 1e-15);
    assert_eq!(steps.pass, vec![1.0, 1.0]);
}

#[test]
fn steps_are_clamped_into_bounds() {
    let cfg = SsmConfig {
        delta_base: 0.5,
        alpha: 10.0,
        delta_min: 0.1,
        delta_max: 1.0,
        ..SsmConfig::default()
    };
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", 2, cfg, &mut rng(10)).unwrap();
    let seq = random_seq(3, 2, &mut rng(11));
    let mut scores = flat_scores(3, 0.0, 2);
    scores.weights = vec![0.0, 1.0, 0.5];
    let steps = block.steps(&seq, &scores);
    assert_eq!(steps.delta[0], 1.0);
    assert_eq!(steps.pass[0], 0.0);
    assert!((steps.delta[1] - 0.5).abs() < 1e-15);
    assert_eq!(steps.delta[2], 1.0);
}

#[test]
fn invalid_step_bounds_are_rejected() {
    let cfg = SsmConfig {
        delta_min: 0.5,
        delta_base: 0.25,
        ..SsmConfig::default()
    };
    let mut store = ParamStore::new();
    assert!(matches!(
        SsmBlock::new(&mut store, "m", 4, cfg, &mut rng(12)),
        Err(StapError::InvalidArgument(_))
    ));
}

#[test]
fn palindrome_forward_matches_reversed_backward() {
    let d = 4;
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", d, SsmConfig::default(), &mut rng(13)).unwrap();
    store.value_mut(block.d).fill(0.0);
    let mut r = rng(14);
    let half: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let rows: Vec<Vec<f64>> = (0..7).map(|t| half[t.min(6 - t)].clone()).collect();
    let seq = seq_from_rows(&rows);
    let mut scores = flat_scores(7, 0.0, d);
    scores.weights = (0..7).map(|t| 0.2 + 0.1 * t.min(6 - t) as f64).collect();
    let fwd = ssm_scan(&seq, &scores, &block, &store, Direction::Forward).unwrap();
    let bwd = ssm_scan(&seq, &scores, &block, &store, Direction::Backward).unwrap();
    for t in 0..7 {
        for k in 0..d {
            assert!((fwd.at(t, k) - bwd.at(6 - t, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", 5, SsmConfig::default(), &mut rng(15)).unwrap();
    let seq = FrameSequence::new(Tensor::zeros(&[6, 5])).unwrap();
    let y = bidirectional_ssm(&seq, &flat_scores(6, 0.3, 5), &block, &store).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn single_frame_bidirectional_formula() {
    let (d_v, d_h) = (3, 5);
    let cfg = SsmConfig {
        d_h,
        ..SsmConfig::default()
    };
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", d_v, cfg.clone(), &mut rng(16)).unwrap();
    store
        .value_mut(block.d)
        .data_mut()
        .copy_from_slice(&[0.5, -1.0, 2.0]);
    let seq = random_seq(1, d_v, &mut rng(17));
    let scores = flat_scores(1, 0.4, d_v);
    let y = bidirectional_ssm(&seq, &scores, &block, &store).unwrap();
    let dt = cfg.delta_base * (1.0 + cfg.alpha * 0.6);
    let x = seq.frame(0);
    let h: Vec<f64> = ref_mv(store.value(block.b), x)
        .iter()
        .map(|v| dt * v)
        .collect();
    let ch = ref_mv(store.value(block.c), &h);
    let dk = store.value(block.d).data();
    for k in 0..d_v {
        let e = 2.0 * ch[k] + 2.0 * dk[k] * x[k];
        assert!((y.at(0, k) - e).abs() < 1e-12);
    }
}

#[test]
fn bidirectional_equals_sum_of_independent_scans() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let block = SsmBlock::new(
            &mut store,
            "m",
            6,
            SsmConfig::default(),
            &mut rng(20 + seed),
        )
        .unwrap();
        let mut r = rng(30 + seed);
        let seq = random_seq(11, 6, &mut r);
        let mut scores = flat_scores(11, 0.0, 6);
        scores.weights = (0..11).map(|_| r.random_range(0.0..1.0)).collect();
        let both = bidirectional_ssm(&seq, &scores, &block, &store).unwrap();
        let mut sum = ssm_scan(&seq, &scores, &block, &store, Direction::Forward).unwrap();
        let bwd = ssm_scan(&seq, &scores, &block, &store, Direction::Backward).unwrap();
        sum.axpy(1.0, &bwd);
        assert_eq!(both, sum);
    }
}

// ---- sparse attention ----

fn ref_dense_attention(seq: &FrameSequence, block: &SparseAttention, store: &ParamStore) -> Tensor {
    let t_len = seq.len();
    let proj = |w| {
        (0..t_len)
            .map(|t| ref_mv(store.value(w), seq.frame(t)))
            .collect::<Vec<_>>()
    };
    let (q, k, v) = (proj(block.wq), proj(block.wk), proj(block.wv));
    let d_a = q[0].len() as f64;
    let rows: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let s: Vec<f64> = (0..t_len)
                .map(|j| q[t].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d_a.sqrt())
                .collect();
            let a = ref_softmax(&s);
            let mut ctx = vec![0.0; q[0].len()];
            for j in 0..t_len {
                for (c, vj) in ctx.iter_mut().zip(&v[j]) {
                    *c += a[j] * vj;
                }
            }
            ref_mv(store.value(block.wo), &ctx)
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn wide_window_matches_dense_oracle() {
    for t_len in [1, 4, 9, 16] {
        let cfg = SparseAttnConfig {
            d_a: 6,
            window_base: t_len as f64,
            window_beta: 0.0,
        };
        let mut store = ParamStore::new();
        let block = SparseAttention::new(&mut store, "a", 5, cfg, &mut rng(40));
        let seq = random_seq(t_len, 5, &mut rng(41 + t_len as u64));
        let sparse = sparse_attention(&seq, &block, &store).unwrap();
        let oracle = ref_dense_attention(&seq, &block, &store);
        assert!(max_abs_diff(&sparse, &oracle) < 1e-10);
        let dense = dense_attention(&seq, &block, &store).unwrap();
        assert!(max_abs_diff(&dense, &oracle) < 1e-10);
    }
}

#[test]
fn single_frame_attention_is_projected_value() {
    let mut store = ParamStore::new();
    let block = SparseAttention::new(
        &mut store,
        "a",
        4,
        SparseAttnConfig::default(),
        &mut rng(42),
    );
    let seq = random_seq(1, 4, &mut rng(43));
    let y = sparse_attention(&seq, &block, &store).unwrap();
    let expect = ref_mv(
        store.value(block.wo),
        &ref_mv(store.value(block.wv), seq.frame(0)),
    );
    for k in 0..4 {
        assert!((y.at(0, k) - expect[k]).abs() < 1e-12);
    }
}

#[test]
fn window_growth_is_local_to_the_frame() {
    let cfg = SparseAttnConfig {
        d_a: 4,
        window_base: 2.0,
        window_beta: 0.0,
    };
    let mut store = ParamStore::new();
    let block = SparseAttention::new(&mut store, "a", 3, cfg, &mut rng(44));
    let seq = random_seq(12, 3, &mut rng(45));
    assert!(block.windows(&seq).iter().all(|&w| w == 2));

    let mut grow = block.clone();
    grow.cfg.window_beta = 1.0;
    let before = grow.windows(&seq);
    let mut rows: Vec<Vec<f64>> = (0..12).map(|t| seq.frame(t).to_vec()).collect();
    rows[5].iter_mut().for_each(|v| *v *= 4.0);
    rows[5][0] += 3.0;
    let after = grow.windows(&seq_from_rows(&rows));
    for t in 0..12 {
        if t == 5 {
            assert!(after[t] > before[t]);
        } else {
            assert_eq!(after[t], before[t]);
        }
    }
}

// ---- fusion and full block ----

#[test]
fn equal_gate_logits_give_thirds() {
    let d_v = 4;
    let mut store = ParamStore::new();
    let fusion = GatedFusion::new(&mut store, "f", d_v, &mut rng(46));
    store.value_mut(fusion.wg).fill(0.0);
    store.value_mut(fusion.bg).fill(0.7);
    let mut r = rng(47);
    let seq = random_seq(5, d_v, &mut r);
    let ys = random_seq(5, d_v, &mut r).tensor().clone();
    let ya = random_seq(5, d_v, &mut r).tensor().clone();
    let out = gated_fusion(&seq, &ys, &ya, &[0.1, 0.2, 0.3, 0.4], &fusion, &store).unwrap();
    for g in out.gates {
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn zero_pathways_leave_the_residual() {
    let d_v = 3;
    let mut store = ParamStore::new();
    let fusion = GatedFusion::new(&mut store, "f", d_v, &mut rng(48));
    store
        .value_mut(fusion.bres)
        .data_mut()
        .copy_from_slice(&[0.1, -0.2, 0.3]);
    let seq = random_seq(4, d_v, &mut rng(49));
    let zero = Tensor::zeros(&[4, d_v]);
    let out = gated_fusion(&seq, &zero, &zero, &[0.0; 3], &fusion, &store).unwrap();
    let bres = store.value(fusion.bres).data();
    for t in 0..4 {
        let e = ref_mv(store.value(fusion.wres), seq.frame(t));
        for k in 0..d_v {
            assert!((out.v_seq.at(t, k) - e[k] - bres[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn gates_form_a_simplex_on_random_inputs() {
    let d_v = 5;
    let mut store = ParamStore::new();
    let fusion = GatedFusion::new(&mut store, "f", d_v, &mut rng(50));
    let mut r = rng(51);
    for _ in 0..100 {
        let seq = random_seq(6, d_v, &mut r);
        let ys = random_seq(6, d_v, &mut r).tensor().map(|v| 10.0 * v);
        let ya = random_seq(6, d_v, &mut r).tensor().map(|v| 10.0 * v);
        let anchor: Vec<f64> = (0..d_v).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = gated_fusion(&seq, &ys, &ya, &anchor, &fusion, &store).unwrap();
        assert!(out.gates.iter().all(|&g| g > 0.0 && g < 1.0));
        assert!((out.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fusion_rejects_mismatched_pathways() {
    let mut store = ParamStore::new();
    let fusion = GatedFusion::new(&mut store, "f", 3, &mut rng(52));
    let seq = random_seq(4, 3, &mut rng(53));
    let bad = Tensor::zeros(&[3, 3]);
    let ok = Tensor::zeros(&[4, 3]);
    assert!(gated_fusion(&seq, &bad, &ok, &[0.0; 3], &fusion, &store).is_err());
    assert!(gated_fusion(&seq, &ok, &ok, &[0.0; 2], &fusion, &store).is_err());
}

#[test]
fn temporal_block_shapes_and_determinism() {
    let cfg = TemporalConfig {
        d_v: 6,
        ..TemporalConfig::default()
    };
    let mut store = ParamStore::new();
    let block = TemporalBlock::new(&mut store, cfg, &mut rng(54)).unwrap();
    let seq = random_seq(10, 6, &mut rng(55));
    let a = temporal_forward(&seq, &block, &store).unwrap();
    let b = temporal_forward(&seq, &block, &store).unwrap();
    assert_eq!(a.v_seq.shape(), &[10, 6]);
    assert_eq!(a.pooled.len(), 6);
    assert_eq!(a.scores.weights.len(), 10);
    assert_eq!(a.v_seq, b.v_seq);
    assert_eq!(a.pooled, b.pooled);
    assert_eq!(a.gates, b.gates);
}

#[test]
fn empty_sequence_is_rejected() {
    assert!(FrameSequence::new(Tensor::zeros(&[0, 4])).is_err());
}
