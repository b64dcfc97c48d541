//! Physical quantities from a solved relaxation: rank diagnostics, voltage
//! phasors, injected currents and inverter setpoints.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use oid_conic::{Settings, Status};
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};
use crate::feeder::FeederModel;
use crate::formulation::{assemble, real_embedding, ConicProblem, DispatchSpec, HouseControl, Var};
use crate::scenario::{Scenario, ScenarioStep};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchSettings {
    pub solver: Settings,
    pub rank_tol: f64,
}

impl Default for DispatchSettings {
    fn default() -> Self {
        Self {
            solver: Settings::default(),
            rank_tol: 1e-5,
        }
    }
}

impl DispatchSettings {
    /// Defaults, with solver tolerances taken from `OID_SOLVER_TOL` if set.
    pub fn from_env() -> Self {
        let mut s = Self::default();
        if let Some(tol) = std::env::var("OID_SOLVER_TOL")
            .ok()
            .and_then(|v| v.parse::<f64>().ok())
        {
            if tol > 0.0 && tol.is_finite() {
                s.solver.feas_tol = tol;
                s.solver.gap_tol = tol;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phasors {
    pub v: Vec<Complex64>,
    pub i: Vec<Complex64>,
    pub rank_ratio: f64,
}

/// Eigenvalues of a Hermitian matrix, descending, from its real embedding.
/// Each eigenvalue of `V` appears twice in the embedding; pairs are merged.
pub fn hermitian_eigen(v: &DMatrix<Complex64>) -> (Vec<f64>, Vec<DVector<Complex64>>) {
    let n = v.nrows();
    let emb = real_embedding(v);
    let eig = SymmetricEigen::new(emb);
    let mut order: Vec<usize> = (0..2 * n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for pair in order.chunks(2) {
        let k = pair[0];
        values.push(0.5 * (eig.eigenvalues[pair[0]] + eig.eigenvalues[pair[1]]));
        let col = eig.eigenvectors.column(k);
        let u = DVector::from_fn(n, |r, _| Complex64::new(col[r], col[n + r]));
        let norm = u.norm();
        vectors.push(u / Complex64::new(norm, 0.0));
    }
    (values, vectors)
}

/// `λ₂/λ₁` of a PSD Hermitian matrix, clamped to `[0, 1]`.
pub fn rank_ratio(v: &DMatrix<Complex64>) -> f64 {
    let (vals, _) = hermitian_eigen(v);
    if vals[0] <= 0.0 {
        return 1.0;
    }
    vals.get(1).map_or(0.0, |l2| (l2 / vals[0]).clamp(0.0, 1.0))
}

/// Rank-one factor of `V` with the slack angle at zero, and `i = Y v`.
pub fn extract_phasors(
    v: &DMatrix<Complex64>,
    admittance: &DMatrix<Complex64>,
    rank_tol: f64,
) -> Result<Phasors> {
    let (vals, vecs) = hermitian_eigen(v);
    let ratio = if vals[0] > 0.0 {
        vals.get(1).map_or(0.0, |l2| (l2 / vals[0]).clamp(0.0, 1.0))
    } else {
        1.0
    };
    if ratio > rank_tol {
        return Err(OidError::NotTight { ratio });
    }
    let u = &vecs[0];
    let anchor = if u[0].norm() > 0.0 {
        u[0].conj() / u[0].norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    let scale = vals[0].max(0.0).sqrt();
    let phasors = u.map(|z| z * anchor * scale);
    let currents = admittance * &phasors;
    Ok(Phasors {
        v: phasors.iter().copied().collect(),
        i: currents.iter().copied().collect(),
        rank_ratio: ratio,
    })
}

/// Multipliers of the constraint families used by the dual cross-check.
/// Entries are 0 for constraints absent from the program.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DualSummary {
    pub active_balance: Vec<f64>,
    pub reactive_balance: Vec<f64>,
    pub curtail_lower: Vec<f64>,
    pub curtail_upper: Vec<f64>,
    /// `(0, 0)` entry of the apparent-power block multiplier.
    pub apparent_power: Vec<f64>,
    pub band_lower: Vec<f64>,
    pub band_upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub loss: f64,
    pub curtailment: f64,
    pub deviation: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub relative_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub status: Status,
    pub voltage_matrix: DMatrix<Complex64>,
    pub rank_ratio: f64,
    pub phasors: Option<Phasors>,
    pub controls: Vec<HouseControl>,
    pub p_avail: Vec<f64>,
    pub p_c: Vec<f64>,
    pub q_s: Vec<f64>,
    pub cost_epigraph: Vec<f64>,
    pub group_epigraph: Vec<f64>,
    pub deviation_epigraph: f64,
    pub objective: ObjectiveBreakdown,
    pub duals: DualSummary,
    pub diagnostics: Diagnostics,
}

impl DispatchSolution {
    pub fn is_tight(&self) -> bool {
        self.phasors.is_some()
    }

    /// Magnitudes `|Vₙ|`, from the phasors when tight, else `√Vₙₙ`.
    pub fn magnitudes(&self) -> Vec<f64> {
        match &self.phasors {
            Some(p) => p.v.iter().map(|z| z.norm()).collect(),
            None => (0..self.voltage_matrix.nrows())
                .map(|i| self.voltage_matrix[(i, i)].re.max(0.0).sqrt())
                .collect(),
        }
    }
}

/// `(P_s, Q_s) = (P̄ − P_c, Q_s)` per house.
pub fn setpoints(sol: &DispatchSolution) -> Vec<(f64, f64)> {
    sol.p_avail
        .iter()
        .zip(&sol.p_c)
        .zip(&sol.q_s)
        .map(|((p, c), q)| (p - c, *q))
        .collect()
}

/// Reads a solver result back through the program bookkeeping.
pub fn recover(
    model: &FeederModel,
    step: &ScenarioStep,
    conic: &ConicProblem,
    raw: &oid_conic::Solution,
    rank_tol: f64,
    seconds: f64,
) -> DispatchSolution {
    let x = &raw.x;
    let h = model.num_houses();
    let val = |v: Var| conic.value(x, v);
    let vm = conic.voltage_matrix(x);
    let ratio = rank_ratio(&vm);
    let phasors = if raw.status == Status::Optimal {
        extract_phasors(&vm, &model.admittance, rank_tol).ok()
    } else {
        None
    };
    let eval = |e: &crate::formulation::Affine| e.eval(&val);
    let objective = ObjectiveBreakdown {
        loss: eval(&conic.objective.loss),
        curtailment: eval(&conic.objective.curtailment),
        deviation: eval(&conic.objective.deviation),
        regularizer: eval(&conic.objective.regularizer),
        total: eval(&conic.objective.total()),
    };
    let opt = |rows: &[Option<usize>], duals: &[f64]| -> Vec<f64> {
        rows.iter()
            .map(|r| r.map_or(0.0, |i| duals.get(i).copied().unwrap_or(0.0)))
            .collect()
    };
    let rows = &conic.rows;
    let duals = DualSummary {
        active_balance: rows
            .active_balance
            .iter()
            .map(|&i| raw.eq_duals.get(i).copied().unwrap_or(0.0))
            .collect(),
        reactive_balance: rows
            .reactive_balance
            .iter()
            .map(|&i| raw.eq_duals.get(i).copied().unwrap_or(0.0))
            .collect(),
        curtail_lower: opt(&rows.curtail_lower, &raw.ineq_duals),
        curtail_upper: opt(&rows.curtail_upper, &raw.ineq_duals),
        apparent_power: rows
            .apparent_power
            .iter()
            .map(|r| {
                r.and_then(|i| raw.lmi_duals.get(i))
                    .map_or(0.0, |z| z[(0, 0)])
            })
            .collect(),
        band_lower: opt(&rows.band_lower, &raw.ineq_duals),
        band_upper: opt(&rows.band_upper, &raw.ineq_duals),
    };
    DispatchSolution {
        status: raw.status,
        voltage_matrix: vm,
        rank_ratio: ratio,
        phasors,
        controls: conic.controls.clone(),
        p_avail: step.p_avail.clone(),
        p_c: (0..h).map(|k| val(Var::Curtail(k))).collect(),
        q_s: (0..h).map(|k| val(Var::Reactive(k))).collect(),
        cost_epigraph: (0..h).map(|k| val(Var::CostEpigraph(k))).collect(),
        group_epigraph: (0..h).map(|k| val(Var::GroupEpigraph(k))).collect(),
        deviation_epigraph: val(Var::Deviation),
        objective,
        duals,
        diagnostics: Diagnostics {
            iterations: raw.iterations,
            relative_gap: raw.relative_gap,
            primal_residual: raw.primal_residual,
            dual_residual: raw.dual_residual,
            primal_objective: raw.primal_objective,
            dual_objective: raw.dual_objective,
            seconds,
        },
    }
}

/// Assembles, solves and recovers one step. Non-optimal solver status is an
/// error; a non-tight relaxation is returned with `phasors = None`.
pub fn solve_dispatch(
    model: &FeederModel,
    scenario: &Scenario,
    step: &ScenarioStep,
    spec: &DispatchSpec,
    settings: &DispatchSettings,
) -> Result<DispatchSolution> {
    let conic = assemble(model, scenario, step, spec)?;
    let start = Instant::now();
    let raw = oid_conic::solve(&conic.problem, &settings.solver)?;
    let seconds = start.elapsed().as_secs_f64();
    if raw.status != Status::Optimal {
        return Err(OidError::Solver { status: raw.status });
    }
    Ok(recover(
        model,
        step,
        &conic,
        &raw,
        settings.rank_tol,
        seconds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outer(v: &DVector<Complex64>) -> DMatrix<Complex64> {
        v * v.adjoint()
    }

    fn sample_voltages() -> DVector<Complex64> {
        DVector::from_fn(5, |i, _| {
            Complex64::from_polar(1.02 - 0.004 * i as f64, 0.1 - 0.013 * i as f64)
        })
    }

    #[test]
    fn rank_one_input_is_recovered_up_to_phase() {
        let v = sample_voltages();
        let y = DMatrix::from_fn(5, 5, |i, j| {
            Complex64::new((i + j) as f64, i as f64 - j as f64)
        });
        let p = extract_phasors(&outer(&v), &y, 1e-5).unwrap();
        let anchor = Complex64::from_polar(1.0, -v[0].arg());
        for (got, want) in p.v.iter().zip(v.iter()) {
            assert!((got - want * anchor).norm() < 1e-10);
        }
        assert!(p.v[0].im.abs() < 1e-14 && p.v[0].re > 0.0);
        let i = &y * DVector::from_column_slice(&p.v);
        assert!(p
            .i
            .iter()
            .zip(i.iter())
            .all(|(a, b)| (a - b).norm() < 1e-12));
        assert!(p.rank_ratio < 1e-12);
    }

    #[test]
    fn second_eigenvalue_is_flagged() {
        let v = sample_voltages();
        // u ⊥ v, unit norm
        let e = DVector::from_fn(5, |i, _| {
            Complex64::new(if i == 1 { 1.0 } else { 0.0 }, 0.0)
        });
        let proj = e.clone() - &v * (v.adjoint() * &e)[0] / Complex64::new(v.norm_squared(), 0.0);
        let u = &proj / Complex64::new(proj.norm(), 0.0);
        let m = outer(&v) + outer(&u) * Complex64::new(0.5, 0.0);
        let expected = 0.5 / v.norm_squared();
        assert!((rank_ratio(&m) - expected).abs() < 1e-12);
        match extract_phasors(&m, &DMatrix::identity(5, 5), 1e-5) {
            Err(OidError::NotTight { ratio }) => assert!((ratio - expected).abs() < 1e-12),
            other => panic!("expected NotTight, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_matrices() {
        assert_eq!(rank_ratio(&DMatrix::zeros(3, 3)), 1.0);
        assert_eq!(rank_ratio(&DMatrix::identity(3, 3)), 1.0);
    }

    proptest! {
        #[test]
        fn rank_ratio_is_a_fraction(re in proptest::collection::vec(-1.0f64..1.0, 8), im in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let b = DMatrix::from_fn(4, 2, |i, j| Complex64::new(re[2 * i + j], im[2 * i + j]));
            let r = rank_ratio(&(&b * b.adjoint()));
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
