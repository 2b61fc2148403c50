mod common;

use common::*;

fn run<S: proptest::strategy::Strategy>(
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), proptest::test_runner::TestCaseError>,
) {
    if let Err(e) = runner().run(&strategy, check) {
        panic!("{e}");
    }
}

#[test]
fn soft_routing_is_a_distribution() {
    run(route_case(), check_soft_normalized);
}

#[test]
fn top_k_keeps_exactly_k_gates() {
    run(route_case(), check_exactly_k);
}

#[test]
fn steps_stay_within_bounds() {
    run(step_case(), check_steps_clamped);
}

#[test]
fn fusion_gates_form_a_simplex() {
    run(gate_case(), check_gate_simplex);
}

#[test]
fn quantile_partitions_are_monotone() {
    run(label_case(), check_quantiles_monotone);
}

#[test]
fn loss_breakdown_is_additive() {
    run(loss_case(), check_loss_additive);
}
