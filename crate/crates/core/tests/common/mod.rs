//! Structural invariants shared by the property suite and the acceptance
//! target. Each checker takes a generated case and fails with a message.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stap_core::numerics::{ParamStore, Tensor};
use stap_core::predictor::total_loss;
use stap_core::spatial::{quantile_partitions, route, MemoryBank};
use stap_core::temporal::{
    gated_fusion, DeltaMode, FrameScoreOutput, FrameSequence, GatedFusion, SsmBlock, SsmConfig,
};

pub const CASES: u32 = 1000;

pub fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

#[derive(Clone, Debug)]
pub struct RouteCase {
    pub partitions: usize,
    pub clusters: usize,
    pub dim: usize,
    pub k: usize,
    pub tau: f64,
    pub slots: Vec<f64>,
    pub w_q: Vec<f64>,
    pub query: Vec<f64>,
}

pub fn route_case() -> impl Strategy<Value = RouteCase> {
    (1usize..5, 1usize..5, 1usize..6, 1usize..6, 0.1f64..5.0).prop_flat_map(|(p, c, d, dq, tau)| {
        (
            1..=p * c,
            vec_in(p * c * d, -3.0, 3.0),
            vec_in(d * dq, -2.0, 2.0),
            vec_in(dq, -5.0, 5.0),
        )
            .prop_map(move |(k, slots, w_q, query)| RouteCase {
                partitions: p,
                clusters: c,
                dim: d,
                k,
                tau,
                slots,
                w_q,
                query,
            })
    })
}

fn run_route(case: &RouteCase) -> stap_core::spatial::RoutingResult {
    let bank = MemoryBank::new(
        Tensor::new(
            vec![case.partitions, case.clusters, case.dim],
            case.slots.clone(),
        )
        .unwrap(),
        Tensor::zeros(&[case.partitions, case.clusters]),
        case.tau,
        0.1,
        5.0,
    )
    .unwrap();
    let w_q = Tensor::new(vec![case.dim, case.query.len()], case.w_q.clone()).unwrap();
    route(&case.query, &bank, &w_q, case.k).unwrap()
}

pub fn check_soft_normalized(case: RouteCase) -> Result<(), TestCaseError> {
    let r = run_route(&case);
    let soft = r.soft.data();
    prop_assert!(soft.iter().all(|p| *p >= 0.0 && *p <= 1.0));
    let sum: f64 = soft.iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {}", sum);
    Ok(())
}

pub fn check_exactly_k(case: RouteCase) -> Result<(), TestCaseError> {
    let r = run_route(&case);
    let nonzero = r.gate.data().iter().filter(|g| **g != 0.0).count();
    prop_assert_eq!(nonzero, case.k);
    prop_assert_eq!(r.selected_flat.len(), case.k);
    let mass: f64 = r.gate.data().iter().sum();
    prop_assert!(mass <= 1.0 + 1e-12);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StepCase {
    pub anchor_mode: bool,
    pub delta_min: f64,
    pub delta_base: f64,
    pub delta_max: f64,
    pub alpha: f64,
    pub rho: f64,
    pub weights: Vec<f64>,
    pub frames: Vec<f64>,
    pub anchor: Vec<f64>,
}

pub fn step_case() -> impl Strategy<Value = StepCase> {
    (
        any::<bool>(),
        0.001f64..0.5,
        0.0f64..1.0,
        0.0f64..2.0,
        -5.0f64..5.0,
        -5.0f64..5.0,
        1usize..10,
    )
        .prop_flat_map(|(anchor_mode, lo, mid, span, alpha, rho, t)| {
            let delta_base = lo + mid;
            let delta_max = delta_base + span;
            (
                vec_in(t, 0.0, 1.0),
                vec_in(t * 3, -4.0, 4.0),
                vec_in(3, -1.0, 1.0),
            )
                .prop_map(move |(weights, frames, anchor)| StepCase {
                    anchor_mode,
                    delta_min: lo,
                    delta_base,
                    delta_max,
                    alpha,
                    rho,
                    weights,
                    frames,
                    anchor,
                })
        })
}

pub fn check_steps_clamped(case: StepCase) -> Result<(), TestCaseError> {
    let cfg = SsmConfig {
        d_h: 2,
        delta_base: case.delta_base,
        alpha: case.alpha,
        rho: case.rho,
        delta_min: case.delta_min,
        delta_max: case.delta_max,
        mode: if case.anchor_mode {
            DeltaMode::Anchor
        } else {
            DeltaMode::Score
        },
    };
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "m", 3, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t = case.weights.len();
    let seq = FrameSequence::new(Tensor::new(vec![t, 3], case.frames.clone()).unwrap()).unwrap();
    let scores = FrameScoreOutput {
        pre_scores: vec![0.0; t],
        weights: case.weights.clone(),
        anchor: case.anchor.clone(),
    };
    let steps = block.steps(&seq, &scores);
    for (d, pass) in steps.delta.iter().zip(&steps.pass) {
        prop_assert!(*d >= case.delta_min && *d <= case.delta_max, "step {}", d);
        prop_assert!(*pass == 0.0 || *pass == 1.0);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GateCase {
    pub seed: u64,
    pub scale: f64,
    pub frames: Vec<f64>,
    pub y_ssm: Vec<f64>,
    pub y_attn: Vec<f64>,
    pub anchor: Vec<f64>,
}

pub fn gate_case() -> impl Strategy<Value = GateCase> {
    (any::<u64>(), 0.01f64..50.0, 1usize..8).prop_flat_map(|(seed, scale, t)| {
        (
            vec_in(t * 4, -3.0, 3.0),
            vec_in(t * 4, -3.0, 3.0),
            vec_in(t * 4, -3.0, 3.0),
            vec_in(4, -1.0, 1.0),
        )
            .prop_map(move |(frames, y_ssm, y_attn, anchor)| GateCase {
                seed,
                scale,
                frames,
                y_ssm,
                y_attn,
                anchor,
            })
    })
}

pub fn check_gate_simplex(case: GateCase) -> Result<(), TestCaseError> {
    let mut store = ParamStore::new();
    let fusion = GatedFusion::new(
        &mut store,
        "f",
        4,
        &mut ChaCha8Rng::seed_from_u64(case.seed),
    );
    let t = case.frames.len() / 4;
    let seq = FrameSequence::new(Tensor::new(vec![t, 4], case.frames.clone()).unwrap()).unwrap();
    let ys = Tensor::new(
        vec![t, 4],
        case.y_ssm.iter().map(|v| v * case.scale).collect(),
    )
    .unwrap();
    let ya = Tensor::new(
        vec![t, 4],
        case.y_attn.iter().map(|v| v * case.scale).collect(),
    )
    .unwrap();
    let out = gated_fusion(&seq, &ys, &ya, &case.anchor, &fusion, &store).unwrap();
    prop_assert!(out.gates.iter().all(|g| *g >= 0.0 && *g <= 1.0));
    prop_assert!((out.gates.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    Ok(())
}

pub fn label_case() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..10).prop_flat_map(|parts| {
        (
            proptest::collection::vec(
                prop_oneof![(-100.0f64..100.0), (0i32..5).prop_map(f64::from)],
                parts..200,
            ),
            Just(parts),
        )
    })
}

pub fn check_quantiles_monotone((labels, parts): (Vec<f64>, usize)) -> Result<(), TestCaseError> {
    let groups = quantile_partitions(&labels, parts);
    prop_assert_eq!(groups.len(), parts);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    prop_assert_eq!(sizes.iter().sum::<usize>(), labels.len());
    for w in groups.windows(2) {
        let hi = w[0].iter().map(|&i| labels[i]).fold(f64::MIN, f64::max);
        let lo = w[1].iter().map(|&i| labels[i]).fold(f64::MAX, f64::min);
        prop_assert!(hi <= lo, "{} > {}", hi, lo);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LossCase {
    pub preds: Vec<f64>,
    pub labels: Vec<f64>,
    pub pref: f64,
    pub balance: f64,
    pub lambda_pref: f64,
    pub lambda_bal: f64,
    pub delta: f64,
}

pub fn loss_case() -> impl Strategy<Value = LossCase> {
    (1usize..40).prop_flat_map(|n| {
        (
            vec_in(n, -10.0, 10.0),
            vec_in(n, -10.0, 10.0),
            0.0f64..5.0,
            0.0f64..5.0,
            0.0f64..2.0,
            0.0f64..2.0,
            0.1f64..3.0,
        )
            .prop_map(
                |(preds, labels, pref, balance, lambda_pref, lambda_bal, delta)| LossCase {
                    preds,
                    labels,
                    pref,
                    balance,
                    lambda_pref,
                    lambda_bal,
                    delta,
                },
            )
    })
}

pub fn check_loss_additive(case: LossCase) -> Result<(), TestCaseError> {
    let b = total_loss(
        &case.preds,
        &case.labels,
        case.pref,
        case.balance,
        case.lambda_pref,
        case.lambda_bal,
        case.delta,
    )
    .unwrap();
    prop_assert_eq!(
        b.total,
        b.reg + b.lambda_pref * b.pref + b.lambda_bal * b.balance
    );
    prop_assert_eq!((b.pref, b.balance), (case.pref, case.balance));
    prop_assert!(b.reg >= 0.0);
    Ok(())
}
