//! Independent KKT verification of a returned solution.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::ipm::{Solution, Status};
use crate::problem::Problem;

/// Per-block residuals computed directly from the affine problem data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `max |eqᵢ(x)|`
    pub eq_residual: f64,
    /// `max(0, −ineqⱼ(x))`
    pub ineq_violation: f64,
    /// `max(0, −λmin(Fₖ(x)))` per LMI.
    pub lmi_violation: Vec<f64>,
    /// `‖c + Σ yᵢ aᵢ − Σ zⱼ gⱼ − Σ ⟨Zₖ, Fₖ⟩‖∞`
    pub stationarity: f64,
    /// `max(0, −min zⱼ)`
    pub ineq_dual_violation: f64,
    /// `max(0, −λmin(Zₖ))` per LMI.
    pub lmi_dual_violation: Vec<f64>,
    /// `zⱼ·ineqⱼ(x)` summed over the orthant.
    pub ineq_complementarity: f64,
    /// `⟨Zₖ, Fₖ(x)⟩` per LMI.
    pub lmi_complementarity: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Set for infeasible solutions: whether the returned multipliers form
    /// a valid Farkas certificate to `tol`.
    pub infeasibility_certificate: Option<bool>,
}

impl KktReport {
    pub fn max_primal_residual(&self) -> f64 {
        self.lmi_violation
            .iter()
            .fold(self.eq_residual.max(self.ineq_violation), |a, &b| a.max(b))
    }

    pub fn max_dual_residual(&self) -> f64 {
        self.lmi_dual_violation
            .iter()
            .fold(self.stationarity.max(self.ineq_dual_violation), |a, &b| {
                a.max(b)
            })
    }

    pub fn max_complementarity(&self) -> f64 {
        self.lmi_complementarity
            .iter()
            .fold(self.ineq_complementarity.abs(), |a, &b| a.max(b.abs()))
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_primal_residual() <= tol
            && self.max_dual_residual() <= tol
            && self.max_complementarity() <= tol
    }
}

fn min_eig(m: &nalgebra::DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Evaluates primal feasibility, dual feasibility and complementarity of
/// `sol` against `problem`, without reusing any solver internals.
pub fn check_kkt(problem: &Problem, sol: &Solution, tol: f64) -> KktReport {
    let x = &sol.x;
    let eq_residual = problem
        .equalities
        .iter()
        .map(|e| e.eval(x).abs())
        .fold(0.0, f64::max);
    let ineq_vals: Vec<f64> = problem.inequalities.iter().map(|e| e.eval(x)).collect();
    let ineq_violation = ineq_vals.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
    let lmi_vals: Vec<_> = problem.lmis.iter().map(|l| l.eval(x)).collect();
    let lmi_violation = lmi_vals.iter().map(|m| (-min_eig(m)).max(0.0)).collect();

    // gradient of the Lagrangian (without the cost for certificates)
    let with_cost = sol.status != Status::Infeasible;
    let mut grad: Vec<f64> = if with_cost {
        problem.cost.clone()
    } else {
        vec![0.0; problem.num_vars]
    };
    let mut dual_const = 0.0;
    for (e, &y) in problem.equalities.iter().zip(&sol.eq_duals) {
        for &(i, a) in &e.terms {
            grad[i] += y * a;
        }
        dual_const += y * e.constant;
    }
    for (e, &z) in problem.inequalities.iter().zip(&sol.ineq_duals) {
        for &(i, a) in &e.terms {
            grad[i] -= z * a;
        }
        dual_const -= z * e.constant;
    }
    for (lmi, zm) in problem.lmis.iter().zip(&sol.lmi_duals) {
        for (var, f) in &lmi.terms {
            grad[*var] -= f.inner(zm);
        }
        dual_const -= lmi.constant.inner(zm);
    }
    let stationarity = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);

    let ineq_dual_violation = sol
        .ineq_duals
        .iter()
        .map(|z| (-z).max(0.0))
        .fold(0.0, f64::max);
    let lmi_dual_violation = sol
        .lmi_duals
        .iter()
        .map(|m| (-min_eig(m)).max(0.0))
        .collect();
    let ineq_complementarity = ineq_vals
        .iter()
        .zip(&sol.ineq_duals)
        .map(|(s, z)| s * z)
        .sum();
    let lmi_complementarity = lmi_vals
        .iter()
        .zip(&sol.lmi_duals)
        .map(|(s, z)| s.dot(z))
        .collect();

    let infeasibility_certificate = (sol.status == Status::Infeasible)
        // Farkas: Aᵀy + Gᵀz = 0 with bᵀy + hᵀz < 0, i.e. the dual constant
        // term of the Lagrangian is positive.
        .then_some(stationarity <= tol && dual_const > 0.0);

    KktReport {
        eq_residual,
        ineq_violation,
        lmi_violation,
        stationarity,
        ineq_dual_violation,
        lmi_dual_violation,
        ineq_complementarity,
        lmi_complementarity,
        primal_objective: problem.objective(x),
        dual_objective: dual_const,
        infeasibility_certificate,
    }
}
