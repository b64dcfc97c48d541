#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use oid_core::feeder::FeederModel;
use oid_core::formulation::DispatchSpec;
use oid_core::oracle::SoftThresholdInputs;
use oid_core::recovery::DispatchSolution;
use oid_core::scenario::{load_scenario, Scenario, ScenarioStep};

pub const PRESETS: [&str; 8] = [
    "oid_d1", "oid_d2", "oid_d3", "rpc_r1", "rpc_r2", "apc_a1", "apc_a2", "apc_a3",
];

/// Index of 12:00 in the shipped day.
pub const PEAK_STEP: usize = 12;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn twelve_house() -> (FeederModel, Scenario) {
    let model = FeederModel::load(&fixture("feeder_12house.json")).unwrap();
    let scenario =
        load_scenario(&model, &fixture("july_day.csv"), &fixture("inverters.json")).unwrap();
    (model, scenario)
}

pub fn toy() -> (FeederModel, Scenario) {
    let model = FeederModel::load(&fixture("toy_feeder.json")).unwrap();
    let scenario = load_scenario(
        &model,
        &fixture("toy_day.csv"),
        &fixture("toy_inverters.json"),
    )
    .unwrap();
    (model, scenario)
}

pub fn preset(name: &str) -> DispatchSpec {
    DispatchSpec::load(&fixture(&format!("specs/{name}.json"))).unwrap()
}

/// Largest nodal power-balance residual of a tight solution: house nodes
/// against their net injection, poles against zero. The slack is free.
pub fn balance_residual(model: &FeederModel, step: &ScenarioStep, sol: &DispatchSolution) -> f64 {
    let ph = sol.phasors.as_ref().expect("tight solution");
    let mut worst: f64 = 0.0;
    for (node, (v, i)) in ph.v.iter().zip(&ph.i).enumerate().skip(1) {
        let s = v * i.conj();
        let want = match model.houses.iter().position(|&n| n == node) {
            Some(k) => Complex64::new(
                step.p_avail[k] - step.p_load[k] - sol.p_c[k],
                sol.q_s[k] - step.q_load[k],
            ),
            None => Complex64::new(0.0, 0.0),
        };
        worst = worst.max((s - want).norm());
    }
    worst
}

/// Minimizes the per-house subproblem by a fine grid over a box known to
/// contain the minimizer, then by repeated local grids of shrinking pitch.
/// Needs `quad` positive definite.
pub fn brute_force_minimize(inputs: &SoftThresholdInputs) -> Vector2<f64> {
    let f = |x: &Vector2<f64>| inputs.objective(x);
    let mu = inputs.quad.symmetric_eigenvalues().min();
    assert!(mu > 0.0, "brute force needs a positive definite quadratic");
    // f(x) ≤ f(0) = 0 implies ‖x‖ ≤ 2(‖c‖ − λ)/μ
    let radius = (2.0 * (inputs.lin.norm() - inputs.lambda).max(0.0) / mu).max(1e-12);
    let mut best = Vector2::zeros();
    let mut best_f = f(&best);
    let coarse = 200;
    for i in 0..=coarse {
        for j in 0..=coarse {
            let x = Vector2::new(
                -radius + 2.0 * radius * i as f64 / coarse as f64,
                -radius + 2.0 * radius * j as f64 / coarse as f64,
            );
            let fx = f(&x);
            if fx < best_f {
                best_f = fx;
                best = x;
            }
        }
    }
    let mut pitch = 2.0 * radius / coarse as f64;
    while pitch > 1e-13 {
        let center = best;
        for i in -10..=10 {
            for j in -10..=10 {
                let x = center + Vector2::new(i as f64, j as f64) * (pitch / 5.0);
                let fx = f(&x);
                if fx < best_f {
                    best_f = fx;
                    best = x;
                }
            }
        }
        pitch /= 4.0;
    }
    best
}

/// Deterministic random subproblems: positive definite `Q`, and `λ` drawn
/// on both sides of the threshold `‖c‖`.
pub fn random_subproblems(count: usize, seed: u64) -> Vec<SoftThresholdInputs> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let quad = a * a.transpose() + Matrix2::identity() * rng.random_range(0.05..1.0);
            let lin = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lambda = lin.norm() * rng.random_range(0.0..1.3);
            SoftThresholdInputs { quad, lin, lambda }
        })
        .collect()
}
