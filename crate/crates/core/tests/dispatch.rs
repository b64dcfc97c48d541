mod common;

use common::*;
use oid_core::feeder::FeederModel;
use oid_core::formulation::{DispatchSpec, PerHouse, PfEncoding};
use oid_core::metrics::{curtailment_cost, losses, voltage_deviation};
use oid_core::oracle::{crosscheck_duals, house_injections, newton_power_flow};
use oid_core::recovery::{setpoints, solve_dispatch, DispatchSettings, DispatchSolution};
use oid_core::scenario::{Scenario, ScenarioStep};
use oid_core::strategies::{strategy_spec, StrategyKind, SELECTION_EPS};

fn solve(
    model: &FeederModel,
    scenario: &Scenario,
    step: &ScenarioStep,
    spec: &DispatchSpec,
) -> DispatchSolution {
    solve_dispatch(model, scenario, step, spec, &DispatchSettings::default()).unwrap()
}

fn mixed_spec() -> DispatchSpec {
    DispatchSpec {
        strategy: StrategyKind::Mixed,
        c_phi: 0.5,
        c_nu: 0.3,
        curtail_a: PerHouse::Uniform(0.2),
        curtail_b: PerHouse::Uniform(0.5),
        lambda: PerHouse::Uniform(0.02),
        lambda_p: 0.01,
        lambda_q: 0.005,
        enforce_pf: true,
        ..Default::default()
    }
}

/// Objective recomputed from the recovered phasors and setpoints.
fn physical_objective(sol: &DispatchSolution, spec: &DispatchSpec, model: &FeederModel) -> f64 {
    let v = &sol.phasors.as_ref().unwrap().v;
    let h = sol.p_c.len();
    let a: Vec<f64> = (0..h).map(|k| spec.curtail_a.get(k)).collect();
    let b: Vec<f64> = (0..h).map(|k| spec.curtail_b.get(k)).collect();
    let group: f64 = (0..h)
        .map(|k| spec.lambda.get(k) * sol.p_c[k].hypot(sol.q_s[k]))
        .sum();
    spec.c_rho * losses(v, model)
        + spec.c_phi * curtailment_cost(&sol.p_c, &a, &b)
        + spec.c_nu * voltage_deviation(v)
        + group
        + spec.lambda_p * sol.p_c.iter().sum::<f64>()
        + spec.lambda_q * sol.q_s.iter().map(|q| q.abs()).sum::<f64>()
}

#[test]
fn recovered_solutions_are_physically_consistent() {
    let (model, scenario) = twelve_house();
    let step = &scenario.steps[PEAK_STEP];
    for spec in [preset("oid_d2"), preset("oid_d3"), mixed_spec()] {
        let sol = solve(&model, &scenario, step, &spec);
        let ph = sol.phasors.as_ref().expect("tight at the peak");
        assert!(sol.rank_ratio <= 1e-5);

        assert!(
            balance_residual(&model, step, &sol) <= 1e-6,
            "{}",
            spec.name
        );

        // objective pieces agree with their physical definitions
        assert!((sol.objective.loss - spec.c_rho * losses(&ph.v, &model)).abs() <= 1e-7);
        if spec.c_nu > 0.0 {
            assert!((sol.deviation_epigraph - voltage_deviation(&ph.v)).abs() <= 1e-7);
        }
        for k in 0..12 {
            if spec.lambda.get(k) > 0.0 && sol.controls[k].any() {
                assert!((sol.group_epigraph[k] - sol.p_c[k].hypot(sol.q_s[k])).abs() <= 1e-7);
            }
        }
        let phys = physical_objective(&sol, &spec, &model);
        assert!(
            (phys - sol.objective.total).abs() <= 1e-6,
            "{}: {phys} vs {}",
            spec.name,
            sol.objective.total
        );

        // setpoints stay inside the operating region
        for (k, (p_s, q_s)) in setpoints(&sol).into_iter().enumerate() {
            let inv = &scenario.inverters[k];
            assert!(p_s * p_s + q_s * q_s <= inv.s_rating * inv.s_rating + 1e-8);
            assert!(sol.p_c[k] >= -1e-9 && sol.p_c[k] <= step.p_avail[k] + 1e-9);
            if spec.enforce_pf {
                assert!(q_s.abs() <= inv.tan_theta() * p_s + 1e-8);
            }
        }

        // the power-flow oracle reproduces the voltages
        let inj = house_injections(&model, step, &setpoints(&sol));
        let pf = newton_power_flow(&model, &inj, scenario.limits.v_slack).unwrap();
        for (a, b) in pf.v.iter().zip(&ph.v) {
            assert!((a.norm() - b.norm()).abs() <= 1e-6);
        }
    }
}

#[test]
fn power_factor_encodings_agree() {
    let (model, scenario) = twelve_house();
    for spec in [preset("oid_d1"), preset("oid_d2")] {
        for t in [10, PEAK_STEP, 15] {
            let step = &scenario.steps[t];
            let two = solve(&model, &scenario, step, &spec);
            let cone = solve(
                &model,
                &scenario,
                step,
                &DispatchSpec {
                    pf_encoding: PfEncoding::Cone,
                    ..spec.clone()
                },
            );
            let (a, b) = (two.objective.total, cone.objective.total);
            // relative agreement, with an absolute floor at solver accuracy
            // for steps where full control drives the loss to almost zero
            assert!(
                (a - b).abs() <= 1e-6 * a.abs().max(b.abs()) + 1e-7,
                "{} at {t}: {a} vs {b}",
                spec.name
            );
        }
    }
}

#[test]
fn no_pv_step_reduces_to_power_flow() {
    let (model, scenario) = twelve_house();
    let step = &scenario.steps[0];
    assert!(step.p_avail.iter().all(|&p| p == 0.0));
    let spec = DispatchSpec {
        lambda: PerHouse::Uniform(1e3),
        ..Default::default()
    };
    let sol = solve(&model, &scenario, step, &spec);
    assert!(sol.is_tight());
    assert!(sol.p_c.iter().chain(&sol.q_s).all(|&x| x.abs() <= 1e-9));
    let pf = newton_power_flow(
        &model,
        &house_injections(&model, step, &setpoints(&sol)),
        1.02,
    )
    .unwrap();
    let v = &sol.phasors.unwrap().v;
    assert!(pf.v.iter().zip(v).all(|(a, b)| (a - b).norm() < 1e-6));
}

#[test]
fn strategy_pins_hold_exactly() {
    let (model, scenario) = twelve_house();
    for t in [9, PEAK_STEP, 16] {
        let step = &scenario.steps[t];
        let apc = solve(&model, &scenario, step, &preset("apc_a2"));
        assert!(apc.q_s.iter().all(|&q| q == 0.0));
        let rpc = solve(&model, &scenario, step, &preset("rpc_r2"));
        assert!(rpc.p_c.iter().all(|&p| p == 0.0));
    }
}

#[test]
fn dual_reconstruction_matches_setpoints() {
    let (model, scenario) = twelve_house();
    for lambda in [0.0, 0.02, 0.097] {
        let spec = DispatchSpec {
            lambda: PerHouse::Uniform(lambda),
            ..preset("oid_d3")
        };
        for t in [11, PEAK_STEP, 14] {
            let sol = solve(&model, &scenario, &scenario.steps[t], &spec);
            assert!(sol.is_tight());
            let report = crosscheck_duals(&sol, &spec, SELECTION_EPS).unwrap();
            assert!(
                report.max_discrepancy <= 1e-5,
                "λ {lambda} step {t}: {}",
                report.max_discrepancy
            );
            for h in report.houses.iter().filter(|h| !h.selected) {
                assert!(
                    h.lin_norm <= h.lambda + 1e-6,
                    "λ {lambda} step {t} house {}",
                    h.house
                );
            }
        }
    }
}

#[test]
fn joint_control_dominates_pinned_strategies() {
    let (model, scenario) = twelve_house();
    let base = DispatchSpec {
        c_phi: 1.0,
        curtail_b: PerHouse::Uniform(0.5),
        lambda: PerHouse::Uniform(0.01),
        ..Default::default()
    };
    for t in [8, 11, PEAK_STEP, 13, 17] {
        let step = &scenario.steps[t];
        for kind in [StrategyKind::Rpc, StrategyKind::Apc] {
            let pinned = strategy_spec(kind, &base).unwrap();
            let joint = pinned.without_pins();
            let (p, j) = (
                solve(&model, &scenario, step, &pinned),
                solve(&model, &scenario, step, &joint),
            );
            assert!(
                j.objective.total <= p.objective.total + 1e-7,
                "{kind:?} at {t}: {} > {}",
                j.objective.total,
                p.objective.total
            );
        }
    }
}
