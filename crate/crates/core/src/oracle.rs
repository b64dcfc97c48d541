//! Independent validators: Newton power flow, exhaustive selection search on
//! small feeders, and the closed-form per-house setpoint obtained from the
//! solver's multipliers.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};
use crate::feeder::FeederModel;
use crate::formulation::DispatchSpec;
use crate::recovery::{solve_dispatch, DispatchSettings, DispatchSolution};
use crate::scenario::{Scenario, ScenarioStep};
use crate::strategies::count_selected;

const PF_TOL: f64 = 1e-10;
const PF_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowResult {
    pub v: Vec<Complex64>,
    pub i: Vec<Complex64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowResult {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.v.iter().map(|z| z.norm()).collect()
    }
}

/// Net complex injection per node for setpoints `(P_s, Q_s)` per house.
pub fn house_injections(
    model: &FeederModel,
    step: &ScenarioStep,
    setpoints: &[(f64, f64)],
) -> Vec<Complex64> {
    let mut s = vec![Complex64::new(0.0, 0.0); model.num_nodes()];
    for (k, &node) in model.houses.iter().enumerate() {
        let (p, q) = setpoints[k];
        s[node] = Complex64::new(p - step.p_load[k], q - step.q_load[k]);
    }
    s
}

/// No-control injections: every inverter at `(P̄, 0)`.
pub fn baseline_injections(model: &FeederModel, step: &ScenarioStep) -> Vec<Complex64> {
    let sp: Vec<(f64, f64)> = step.p_avail.iter().map(|&p| (p, 0.0)).collect();
    house_injections(model, step, &sp)
}

fn mismatch(
    y: &DMatrix<Complex64>,
    v: &DVector<Complex64>,
    s: &[Complex64],
) -> (DVector<Complex64>, DVector<Complex64>) {
    let i = y * v;
    let calc = DVector::from_fn(v.len(), |k, _| v[k] * i[k].conj());
    let f = DVector::from_fn(v.len(), |k, _| calc[k] - s[k]);
    (f, i)
}

/// Full Newton–Raphson in polar coordinates from a flat start. Node 0 is
/// the slack at `v_slack∠0`; all other nodes are PQ with injection `s`.
pub fn newton_power_flow(
    model: &FeederModel,
    injections: &[Complex64],
    v_slack: f64,
) -> Result<PowerFlowResult> {
    let n = model.num_nodes();
    let y = &model.admittance;
    let mut vm = vec![v_slack; n];
    let mut va = vec![0.0; n];
    let volts =
        |vm: &[f64], va: &[f64]| DVector::from_fn(n, |k, _| Complex64::from_polar(vm[k], va[k]));
    let m = n - 1;
    for iter in 0..=PF_MAX_ITER {
        let v = volts(&vm, &va);
        let (f, i) = mismatch(y, &v, injections);
        let worst = (1..n)
            .map(|k| f[k].re.abs().max(f[k].im.abs()))
            .fold(0.0, f64::max);
        if worst <= PF_TOL {
            return Ok(PowerFlowResult {
                v: v.iter().copied().collect(),
                i: i.iter().copied().collect(),
                converged: true,
                iterations: iter,
                max_mismatch: worst,
            });
        }
        if iter == PF_MAX_ITER || !worst.is_finite() {
            return Err(OidError::PowerFlow {
                iterations: iter,
                mismatch: worst,
            });
        }
        // dS/dθ = j diag(V) conj(diag(I) − Y diag(V))
        // dS/d|V| = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let unit = DVector::from_fn(n, |k, _| v[k] / vm[k]);
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for r in 1..n {
            for c in 1..n {
                let mut ds_da = -v[r] * (y[(r, c)] * v[c]).conj();
                let mut ds_dm = v[r] * (y[(r, c)] * unit[c]).conj();
                if r == c {
                    ds_da += v[r] * i[r].conj();
                    ds_dm += i[r].conj() * unit[r];
                }
                ds_da *= Complex64::new(0.0, 1.0);
                jac[(r - 1, c - 1)] = ds_da.re;
                jac[(r - 1, m + c - 1)] = ds_dm.re;
                jac[(m + r - 1, c - 1)] = ds_da.im;
                jac[(m + r - 1, m + c - 1)] = ds_dm.im;
            }
        }
        let rhs = DVector::from_fn(2 * m, |k, _| {
            if k < m {
                -f[k + 1].re
            } else {
                -f[k - m + 1].im
            }
        });
        let dx = jac.lu().solve(&rhs).ok_or(OidError::PowerFlow {
            iterations: iter,
            mismatch: worst,
        })?;
        for k in 1..n {
            va[k] += dx[k - 1];
            vm[k] += dx[m + k - 1];
        }
    }
    unreachable!("loop returns on the last iteration")
}

/// Solution of one selection subproblem of the exhaustive search.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub selection: Vec<bool>,
    pub objective: Option<f64>,
    pub tight: bool,
    pub rank_ratio: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExhaustiveResult {
    pub best: Option<Assignment>,
    pub assignments: Vec<Assignment>,
}

pub const MAX_EXHAUSTIVE_HOUSES: usize = 5;

/// Enumerates every selection with at most `k` controlled inverters and
/// solves the relaxation with the others fixed at `(P̄, 0)`.
pub fn minp_exhaustive(
    model: &FeederModel,
    scenario: &Scenario,
    step: &ScenarioStep,
    spec: &DispatchSpec,
    k: usize,
    settings: &DispatchSettings,
) -> Result<ExhaustiveResult> {
    let h = model.num_houses();
    if h > MAX_EXHAUSTIVE_HOUSES {
        return Err(OidError::Spec(format!(
            "exhaustive search is capped at {MAX_EXHAUSTIVE_HOUSES} houses, got {h}"
        )));
    }
    let masks: Vec<u32> = (0..1u32 << h)
        .filter(|m| m.count_ones() as usize <= k)
        .collect();
    let assignments: Vec<Assignment> = masks
        .par_iter()
        .map(|&mask| {
            let selection: Vec<bool> = (0..h).map(|b| mask >> b & 1 == 1).collect();
            let sub = DispatchSpec {
                selection: Some(selection.clone()),
                ..spec.clone()
            };
            match solve_dispatch(model, scenario, step, &sub, settings) {
                Ok(sol) => Assignment {
                    selection,
                    objective: Some(sol.objective.total),
                    tight: sol.is_tight(),
                    rank_ratio: Some(sol.rank_ratio),
                    error: None,
                },
                Err(e) => Assignment {
                    selection,
                    objective: None,
                    tight: false,
                    rank_ratio: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let best = assignments
        .iter()
        .filter(|a| a.tight)
        .min_by(|a, b| {
            a.objective
                .unwrap_or(f64::INFINITY)
                .total_cmp(&b.objective.unwrap_or(f64::INFINITY))
        })
        .cloned();
    Ok(ExhaustiveResult { best, assignments })
}

/// Data of the per-house subproblem
/// `min ½xᵀQx + cᵀx + λ‖x‖₂` over `x = (P_c, Q_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftThresholdInputs {
    pub quad: Matrix2<f64>,
    pub lin: Vector2<f64>,
    pub lambda: f64,
}

impl SoftThresholdInputs {
    pub fn objective(&self, x: &Vector2<f64>) -> f64 {
        0.5 * (x.transpose() * self.quad * x)[0] + self.lin.dot(x) + self.lambda * x.norm()
    }

    /// `η − (η/2) cᵀ(ηQ + λ²/2 I)⁻¹c`.
    fn eta_objective(&self, eta: f64) -> f64 {
        let m = self.quad * eta + Matrix2::identity() * (self.lambda * self.lambda / 2.0);
        match m.try_inverse() {
            Some(inv) => eta - 0.5 * eta * (self.lin.transpose() * inv * self.lin)[0],
            None => f64::INFINITY,
        }
    }

    fn eta_slope(&self, eta: f64) -> f64 {
        // d/dη: 1 − ½ cᵀ M⁻¹ (λ²/2) M⁻¹ c with M = ηQ + λ²/2 I
        let a = self.lambda * self.lambda / 2.0;
        let m = self.quad * eta + Matrix2::identity() * a;
        match m.try_inverse() {
            Some(inv) => {
                let u = inv * self.lin;
                1.0 - 0.5 * a * u.norm_squared()
            }
            None => f64::INFINITY,
        }
    }

    fn minimizer_for(&self, eta: f64) -> Vector2<f64> {
        let m = self.quad * eta + Matrix2::identity() * (self.lambda * self.lambda / 2.0);
        -(m.try_inverse().unwrap_or_else(Matrix2::zeros) * self.lin) * eta
    }
}

/// Shrinkage-thresholding solution of the per-house subproblem.
pub fn soft_threshold_setpoint(inputs: &SoftThresholdInputs) -> Vector2<f64> {
    let c = inputs.lin;
    let lam = inputs.lambda;
    if c.norm() <= lam {
        return Vector2::zeros();
    }
    if lam == 0.0 {
        return -(inputs.quad.try_inverse().unwrap_or_else(Matrix2::zeros) * c);
    }
    let eta = minimize_eta(inputs);
    inputs.minimizer_for(eta)
}

/// Golden-section search for the scalar η problem on a bracket grown until
/// the objective turns, polished by bisection on its (monotone) slope.
fn minimize_eta(inputs: &SoftThresholdInputs) -> f64 {
    let f = |e: f64| inputs.eta_objective(e);
    let mut hi = 1.0;
    let mut f_hi = f(hi);
    let mut f_prev = f(0.0);
    let mut lo = 0.0;
    while f_hi < f_prev && hi < 1e300 {
        lo = hi / 2.0;
        f_prev = f_hi;
        hi *= 2.0;
        f_hi = f(hi);
    }
    if lo > 0.0 {
        lo /= 2.0;
    }
    let (mut a, mut b) = (lo, hi);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-12 * b.max(1.0) {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    // f is flat near its minimizer, so refine on the slope inside a widened
    // bracket
    let (mut a, mut b) = ((a - (b - a) * 1e3).max(0.0), b + (b - a) * 1e3 + 1e-9);
    if inputs.eta_slope(a) >= 0.0 {
        a = 0.0;
    }
    while inputs.eta_slope(b) < 0.0 {
        b *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if inputs.eta_slope(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Per-house outcome of the dual reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseCrosscheck {
    pub house: usize,
    pub selected: bool,
    /// `‖c_h‖₂` and the threshold it is compared against.
    pub lin_norm: f64,
    pub lambda: f64,
    /// Closed-form setpoint, when `Q_h` is nonsingular or the threshold holds.
    pub closed_form: Option<[f64; 2]>,
    pub solver: [f64; 2],
    /// `‖closed_form − solver‖∞`, or the subgradient residual when `Q_h` is
    /// singular and `‖c_h‖₂` is not strictly below `λ`.
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub houses: Vec<HouseCrosscheck>,
    pub max_discrepancy: f64,
}

/// Smallest eigenvalue of `Q_h` below which the closed form is not used.
const SINGULAR_Q: f64 = 1e-6;
/// Relative margin under which `‖c_h‖` counts as equal to `λ`.
const THRESHOLD_TIE: f64 = 1e-6;
/// Setpoint norm treated as zero in the stationarity check.
const ZERO_SETPOINT: f64 = 1e-8;

/// Rebuilds each house's subproblem from the solver multipliers and
/// compares its closed-form solution with the solver setpoint. Requires no
/// deviation term, no power-factor cuts, no entrywise weights and no pins.
pub fn crosscheck_duals(
    sol: &DispatchSolution,
    spec: &DispatchSpec,
    eps: f64,
) -> Result<CrosscheckReport> {
    if spec.c_nu != 0.0 || spec.enforce_pf || spec.lambda_p != 0.0 || spec.lambda_q != 0.0 {
        return Err(OidError::Spec(
            "dual cross-check needs c_nu = 0, no PF cuts and no entrywise weights".into(),
        ));
    }
    if spec.pin_curtailment || spec.pin_reactive || spec.selection.is_some() {
        return Err(OidError::Spec(
            "dual cross-check needs an unpinned spec".into(),
        ));
    }
    let d = &sol.duals;
    let h = sol.p_c.len();
    if d.active_balance.len() != h || d.apparent_power.len() != h {
        return Err(OidError::MissingDuals(
            "balance or apparent-power multipliers".into(),
        ));
    }
    let (selected_mask, _) = count_selected(&sol.p_c, &sol.q_s, eps);
    let mut houses = Vec::with_capacity(h);
    for k in 0..h {
        if !sol.controls[k].curtail || !sol.controls[k].reactive {
            continue;
        }
        let gamma = d.apparent_power[k];
        let a = if spec.c_phi > 0.0 {
            spec.c_phi * spec.curtail_a.get(k)
        } else {
            0.0
        };
        let b = if spec.c_phi > 0.0 {
            spec.c_phi * spec.curtail_b.get(k)
        } else {
            0.0
        };
        let quad = Matrix2::new(2.0 * a + 2.0 * gamma, 0.0, 0.0, 2.0 * gamma);
        let lin = Vector2::new(
            b + d.active_balance[k] + d.curtail_upper[k]
                - d.curtail_lower[k]
                - 2.0 * gamma * sol.p_avail[k],
            -d.reactive_balance[k],
        );
        let lambda = spec.lambda.get(k);
        let inputs = SoftThresholdInputs { quad, lin, lambda };
        let x = Vector2::new(sol.p_c[k], sol.q_s[k]);
        let min_eig = quad.symmetric_eigenvalues().min();
        // with Q_h singular and ‖c_h‖ = λ the minimizers form a ray, so
        // only stationarity can be checked
        let unique = min_eig > SINGULAR_Q || lin.norm() < lambda * (1.0 - THRESHOLD_TIE);
        let (closed_form, discrepancy) = if unique {
            let xc = soft_threshold_setpoint(&inputs);
            (Some([xc[0], xc[1]]), (xc - x).amax())
        } else {
            // Q x + c + λ x/‖x‖ = 0, or ‖Q x + c‖ ≤ λ at x = 0
            let g = quad * x + lin;
            let r = if x.norm() > ZERO_SETPOINT {
                (g + x * (lambda / x.norm())).amax()
            } else {
                (g.norm() - lambda).max(0.0)
            };
            (None, r)
        };
        houses.push(HouseCrosscheck {
            house: k,
            selected: selected_mask[k],
            lin_norm: lin.norm(),
            lambda,
            closed_form,
            solver: [x[0], x[1]],
            discrepancy,
        });
    }
    let max_discrepancy = houses.iter().map(|c| c.discrepancy).fold(0.0, f64::max);
    Ok(CrosscheckReport {
        houses,
        max_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{
        build_admittance, EdgeConfig, FeederConfig, LineParams, NodeConfig, NodeRole, PerUnitBase,
    };

    fn two_node(shunt: bool) -> FeederModel {
        let mut line = LineParams::pole_pole(200.0);
        if !shunt {
            line.capacitance_uf_per_km = 0.0;
        }
        build_admittance(&FeederConfig {
            base: PerUnitBase::default(),
            nodes: vec![
                NodeConfig {
                    id: 0,
                    role: NodeRole::Slack,
                    name: None,
                },
                NodeConfig {
                    id: 1,
                    role: NodeRole::House,
                    name: None,
                },
            ],
            edges: vec![EdgeConfig {
                from: 0,
                to: 1,
                line,
            }],
        })
        .unwrap()
    }

    #[test]
    fn flat_profile_without_injections() {
        let m = two_node(false);
        let r = newton_power_flow(&m, &[Complex64::new(0.0, 0.0); 2], 1.02).unwrap();
        for v in &r.v {
            assert!((v.norm() - 1.02).abs() < 1e-12 && v.arg().abs() < 1e-12);
        }
    }

    #[test]
    fn two_bus_closed_form() {
        let m = two_node(false);
        let z = m.edges[0].pi.series.inv();
        let v0 = 1.02;
        let load = Complex64::new(0.3, 0.1);
        let r = newton_power_flow(&m, &[Complex64::new(0.0, 0.0), -load], v0).unwrap();
        // V₁(V₁ − V₀)* = −S z*, with V₁ = x + jy:
        // |V₁|² − xV₀ = Re c,  −yV₀ = Im c
        let c = -load * z.conj();
        let y = -c.im / v0;
        let x = (v0 + (v0 * v0 - 4.0 * (y * y - c.re)).sqrt()) / 2.0;
        assert!(
            (r.v[1] - Complex64::new(x, y)).norm() < 1e-10,
            "{:?} vs {x} {y}",
            r.v[1]
        );
        assert!(r.converged && r.iterations <= 6);
    }

    #[test]
    fn soft_threshold_boundary_is_exact_zero() {
        let inp = SoftThresholdInputs {
            quad: Matrix2::new(1.0, 0.2, 0.2, 2.0),
            lin: Vector2::new(0.6, 0.8),
            lambda: 1.0,
        };
        assert_eq!(soft_threshold_setpoint(&inp), Vector2::zeros());
    }

    #[test]
    fn unregularized_minimum() {
        let q = Matrix2::new(2.0, 0.5, 0.5, 1.0);
        let c = Vector2::new(1.0, -0.3);
        let x = soft_threshold_setpoint(&SoftThresholdInputs {
            quad: q,
            lin: c,
            lambda: 0.0,
        });
        let direct = -(q.try_inverse().unwrap() * c);
        assert!((x - direct).amax() < 1e-14);
    }

    #[test]
    fn scalar_case_matches_shrinkage() {
        // diagonal Q: with c along an eigenvector, x = −(‖c‖ − λ)/q · c/‖c‖
        let inp = SoftThresholdInputs {
            quad: Matrix2::new(2.0, 0.0, 0.0, 5.0),
            lin: Vector2::new(3.0, 0.0),
            lambda: 1.0,
        };
        let x = soft_threshold_setpoint(&inp);
        assert!((x[0] + 1.0).abs() < 1e-12 && x[1].abs() < 1e-14, "{x:?}");
    }
}
