mod common;

use common::*;
use nalgebra::Vector2;
use oid_core::formulation::{DispatchSpec, PerHouse};
use oid_core::oracle::{minp_exhaustive, soft_threshold_setpoint, SoftThresholdInputs};
use oid_core::recovery::{solve_dispatch, DispatchSettings};
use oid_core::strategies::{count_selected, SELECTION_EPS};

#[test]
fn closed_form_matches_brute_force() {
    let cases = random_subproblems(150, 2024);
    let mut shrunk = 0;
    for (i, inputs) in cases.iter().enumerate() {
        let closed = soft_threshold_setpoint(inputs);
        let brute = brute_force_minimize(inputs);
        assert!(
            (closed - brute).amax() <= 1e-6,
            "case {i}: {closed:?} vs {brute:?}"
        );
        if inputs.lin.norm() <= inputs.lambda {
            assert_eq!(closed, Vector2::zeros());
        } else {
            shrunk += 1;
        }
    }
    assert!(shrunk > 50 && shrunk < 150);
}

#[test]
fn threshold_boundary_is_exact_zero() {
    for inputs in random_subproblems(20, 5) {
        let at_threshold = SoftThresholdInputs {
            lambda: inputs.lin.norm(),
            ..inputs
        };
        assert_eq!(soft_threshold_setpoint(&at_threshold), Vector2::zeros());
    }
}

fn toy_spec(lambda: f64) -> DispatchSpec {
    DispatchSpec {
        c_phi: 1.0,
        curtail_b: PerHouse::Uniform(1.0),
        lambda: PerHouse::Uniform(lambda),
        ..Default::default()
    }
}

#[test]
fn enumeration_bounds_the_relaxation_on_the_toy_feeder() {
    let (model, scenario) = toy();
    let settings = DispatchSettings::default();
    let spec = toy_spec(0.0);
    for step in &scenario.steps {
        let relaxed = solve_dispatch(&model, &scenario, step, &spec, &settings).unwrap();
        assert!(relaxed.is_tight());
        let used = count_selected(&relaxed.p_c, &relaxed.q_s, SELECTION_EPS).1;
        for k in 1..=4 {
            let best = minp_exhaustive(&model, &scenario, step, &spec, k, &settings)
                .unwrap()
                .best
                .unwrap();
            let exhaustive = best.objective.unwrap();
            let rel = (exhaustive - relaxed.objective.total) / relaxed.objective.total.abs();
            assert!(
                rel >= -1e-7,
                "{} K={k}: {exhaustive} < {}",
                step.time,
                relaxed.objective.total
            );
            if used <= k {
                assert!(rel <= 1e-5, "{} K={k}: gap {rel}", step.time);
            }
        }
    }
}

#[test]
fn uncontrolled_toy_peak_violates_the_band() {
    let (model, scenario) = toy();
    for step in &scenario.steps {
        let pf = oid_core::oracle::newton_power_flow(
            &model,
            &oid_core::oracle::baseline_injections(&model, step),
            scenario.limits.v_slack,
        )
        .unwrap();
        assert!(pf.magnitudes().iter().any(|&m| m > scenario.limits.v_max));
    }
}
