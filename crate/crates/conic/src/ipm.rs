//! Homogeneous self-dual primal-dual interior-point method with
//! Nesterov–Todd scaling and Mehrotra predictor-corrector steps.
//!
//! The embedding solved is
//!
//! ```text
//! [0]   [ 0   Aᵀ  Gᵀ  c ] [x]   [0]
//! [0] = [-A   0   0   b ] [y] - [0]
//! [s]   [-G   0   0   h ] [z]   [0]
//! [κ]   [-cᵀ -bᵀ -hᵀ  0 ] [τ]   [0]
//! ```
//!
//! with `s, z ∈ K` and `τ, κ ≥ 0`. On convergence `τ > 0` yields the
//! primal-dual optimum `(x, y, z, s)/τ`; `τ → 0` yields an infeasibility
//! certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cone::{
    g_times, gt_times, h_vec, jordan, lambda_solve, max_step, ConeVec, PsdScaling, Scaling,
};
use crate::kkt::Kkt;
use crate::problem::{Problem, StandardForm};
use crate::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Relative primal/dual residual tolerance.
    pub feas_tol: f64,
    /// Relative duality-gap tolerance.
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary factor for the combined step.
    pub step_fraction: f64,
    pub verbose: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            max_iter: 200,
            step_fraction: 0.99,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    /// Primal infeasible; `eq_duals`/`ineq_duals`/`lmi_duals` hold a Farkas
    /// certificate normalized to `bᵀy + hᵀz = -1`.
    Infeasible,
    /// Dual infeasible; `x` holds a descent ray normalized to `cᵀx = -1`.
    Unbounded,
    MaxIterations,
    Numerical,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::MaxIterations => "max_iter",
            Status::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

/// Result of a solve. Multipliers follow the Lagrangian
/// `cᵀx + Σ yᵢ·eqᵢ(x) − Σ zⱼ·ineqⱼ(x) − Σ ⟨Zₖ, Fₖ(x)⟩`, so `z ≥ 0`, `Z ⪰ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub ineq_slacks: Vec<f64>,
    pub lmi_duals: Vec<DMatrix<f64>>,
    pub lmi_slacks: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `sᵀz / max(1, min(|pobj|, |dobj|))`, in the units of the cost vector.
    pub relative_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Iteration at which a numerical breakdown occurred, if any.
    pub failed_iteration: Option<usize>,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

#[derive(Clone)]
struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: ConeVec,
    s: ConeVec,
    tau: f64,
    kappa: f64,
}

#[derive(Clone)]
struct Residuals {
    rx: DVector<f64>,
    ry: DVector<f64>,
    rz: ConeVec,
    rt: f64,
    pres: f64,
    dres: f64,
    pcost: f64,
    dcost: f64,
    relgap: f64,
    /// The same gap on the cost-normalized problem.
    scaled_gap: f64,
    pinf: Option<f64>,
    dinf: Option<f64>,
}

fn identity_scaling(lin: usize, dims: &[usize]) -> Scaling {
    Scaling {
        d: DVector::from_element(lin, 1.0),
        lambda_lin: DVector::from_element(lin, 1.0),
        psd: dims
            .iter()
            .map(|&n| PsdScaling {
                rti: DMatrix::identity(n, n),
                lambda: DVector::from_element(n, 1.0),
                rinv2: DMatrix::identity(n, n),
            })
            .collect(),
    }
}

/// Solves a conic program. Non-optimal outcomes are reported through
/// [`Solution::status`]; `Err` is returned only for malformed input.
pub fn solve(problem: &Problem, settings: &Settings) -> Result<Solution, SolverError> {
    problem.validate()?;
    let sf = StandardForm::from_problem(problem);
    Ok(Solver::new(&sf, settings).run())
}

struct Solver<'a> {
    sf: &'a StandardForm,
    settings: &'a Settings,
    h: ConeVec,
    dims: Vec<usize>,
    resx0: f64,
    resy0: f64,
    resz0: f64,
}

impl<'a> Solver<'a> {
    fn new(sf: &'a StandardForm, settings: &'a Settings) -> Self {
        let h = h_vec(sf);
        let dims = sf.psd.iter().map(|b| b.dim).collect();
        Self {
            resx0: sf.c.norm().max(1.0),
            resy0: sf.b.norm().max(1.0),
            resz0: h.norm().max(1.0),
            sf,
            settings,
            h,
            dims,
        }
    }

    fn lin_dim(&self) -> usize {
        self.sf.g_lin.len()
    }

    fn initial_point(&self) -> Option<Iterate> {
        let sf = self.sf;
        let ident = identity_scaling(self.lin_dim(), &self.dims);
        let kkt = Kkt::factor(sf, &ident)?;
        let zero_n = DVector::zeros(sf.n);
        let zero_m = DVector::zeros(sf.b.len());
        // x minimizes ‖Gx − h‖ subject to Ax = b; s = h − Gx.
        let (x, _, zz, _) = kkt.solve(&zero_n, &sf.b, &self.h)?;
        let mut s = zz;
        s.scale(-1.0);
        let zero_cone = ConeVec::zeros(self.lin_dim(), &self.dims);
        let (_, y, mut z, _) = kkt.solve(&(-&sf.c), &zero_m, &zero_cone)?;
        let e = ConeVec::identity(self.lin_dim(), &self.dims);
        let shift = |v: &mut ConeVec| {
            let t = v.max_violation();
            if t >= -1e-8 * v.norm().max(1.0) {
                v.axpy(1.0 + t, &e);
            }
        };
        shift(&mut s);
        shift(&mut z);
        Some(Iterate {
            x,
            y,
            z,
            s,
            tau: 1.0,
            kappa: 1.0,
        })
    }

    fn residuals(&self, it: &Iterate) -> Residuals {
        let sf = self.sf;
        let hrx = sf.a.transpose() * &it.y + gt_times(sf, &it.z);
        let hry = &sf.a * &it.x;
        let mut hrz = g_times(sf, &it.x);
        hrz.axpy(1.0, &it.s);
        let cx = sf.c.dot(&it.x);
        let by = sf.b.dot(&it.y);
        let hz = self.h.dot(&it.z);

        let rx = &hrx + &sf.c * it.tau;
        let ry = &hry - &sf.b * it.tau;
        let mut rz = hrz.clone();
        rz.axpy(-it.tau, &self.h);
        let rt = it.kappa + cx + by + hz;

        let tau = it.tau;
        let pres = (ry.norm() / tau / self.resy0).max(rz.norm() / tau / self.resz0);
        let dres = rx.norm() / tau / self.resx0;
        let pcost = cx / tau;
        let dcost = -(by + hz) / tau;
        let sz = it.s.dot(&it.z) / (tau * tau);
        // measured in the caller's cost units so the tolerance does not
        // depend on the internal normalization
        let cs = sf.cost_scale;
        let relgap = sz * cs / (cs * pcost.abs().min(dcost.abs())).max(1.0);
        let scaled_gap = sz / pcost.abs().min(dcost.abs()).max(1.0);
        let pinf = (hz + by < 0.0).then(|| hrx.norm() / self.resx0 / (-(hz + by)));
        let dinf =
            (cx < 0.0).then(|| (hry.norm() / self.resy0).max(hrz.norm() / self.resz0) / (-cx));
        Residuals {
            rx,
            ry,
            rz,
            rt,
            pres,
            dres,
            pcost,
            dcost,
            relgap,
            scaled_gap,
            pinf,
            dinf,
        }
    }

    /// Residuals within tolerance and the gap within tolerance on the
    /// cost-normalized problem. When the objective is small next to the
    /// cost coefficients this is looser than `relgap ≤ gap_tol`, so it is
    /// only accepted once iterating stops paying off.
    fn acceptable(&self, res: &Residuals) -> bool {
        let st = self.settings;
        res.pres <= st.feas_tol && res.dres <= st.feas_tol && res.scaled_gap <= st.gap_tol
    }

    /// Ends the solve early. The current point is used if acceptable, else
    /// the best acceptable point seen, else the failure status stands.
    fn stop(
        &self,
        it: &Iterate,
        res: &Residuals,
        best: Option<&(Iterate, Residuals, usize)>,
        status: Status,
        iterations: usize,
        failed: Option<usize>,
    ) -> Solution {
        if self.acceptable(res) {
            self.finish(it, res, Status::Optimal, iterations, None)
        } else if let Some((bit, bres, biter)) = best {
            self.finish(bit, bres, Status::Optimal, *biter, None)
        } else {
            self.finish(it, res, status, iterations, failed)
        }
    }

    fn finish(
        &self,
        it: &Iterate,
        res: &Residuals,
        status: Status,
        iterations: usize,
        failed: Option<usize>,
    ) -> Solution {
        let (xs, ys, zs, ss) = match status {
            Status::Infeasible => {
                let scale = -(self.sf.b.dot(&it.y) + self.h.dot(&it.z));
                (0.0, 1.0 / scale, 1.0 / scale, 0.0)
            }
            Status::Unbounded => {
                let scale = -self.sf.c.dot(&it.x);
                (1.0 / scale, 0.0, 0.0, 1.0 / scale)
            }
            _ => {
                let t = 1.0 / it.tau;
                (t, t, t, t)
            }
        };
        // undo the cost normalization on objective-carrying quantities
        let (ys, zs) = if status == Status::Infeasible {
            (ys, zs)
        } else {
            (ys * self.sf.cost_scale, zs * self.sf.cost_scale)
        };
        let mut z = it.z.clone();
        z.scale(zs);
        let mut s = it.s.clone();
        s.scale(ss);
        Solution {
            status,
            x: (&it.x * xs).iter().copied().collect(),
            eq_duals: (&it.y * ys).iter().copied().collect(),
            ineq_duals: z.lin.iter().copied().collect(),
            ineq_slacks: s.lin.iter().copied().collect(),
            lmi_duals: z.mats,
            lmi_slacks: s.mats,
            iterations,
            primal_objective: res.pcost * self.sf.cost_scale,
            dual_objective: res.dcost * self.sf.cost_scale,
            relative_gap: res.relgap,
            primal_residual: res.pres,
            dual_residual: res.dres,
            failed_iteration: failed,
        }
    }

    fn run(&self) -> Solution {
        let sf = self.sf;
        let st = self.settings;
        let degree = (self.lin_dim() + self.dims.iter().sum::<usize>()) as f64;

        let Some(mut it) = self.initial_point() else {
            let it = Iterate {
                x: DVector::zeros(sf.n),
                y: DVector::zeros(sf.b.len()),
                z: ConeVec::identity(self.lin_dim(), &self.dims),
                s: ConeVec::identity(self.lin_dim(), &self.dims),
                tau: 1.0,
                kappa: 1.0,
            };
            let res = self.residuals(&it);
            return self.finish(&it, &res, Status::Numerical, 0, Some(0));
        };
        let Some(mut scaling) = Scaling::new(&it.s, &it.z) else {
            let res = self.residuals(&it);
            return self.finish(&it, &res, Status::Numerical, 0, Some(0));
        };

        let neg_c = -&sf.c;
        let mut prev_gap = f64::INFINITY;
        let mut stalled = 0;
        let mut best: Option<(Iterate, Residuals, usize)> = None;
        for iter in 0..=st.max_iter {
            let res = self.residuals(&it);
            if st.verbose {
                eprintln!(
                    "{iter:3} pcost {:+.9e} dcost {:+.9e} gap {:.2e} pres {:.2e} dres {:.2e} tau {:.2e} kappa {:.2e}",
                    res.pcost, res.dcost, res.relgap, res.pres, res.dres, it.tau, it.kappa
                );
            }
            if res.pres <= st.feas_tol && res.dres <= st.feas_tol && res.relgap <= st.gap_tol {
                return self.finish(&it, &res, Status::Optimal, iter, None);
            }
            // progress below a quarter of the gap per iteration three times
            // running means the attainable accuracy has been reached
            // later iterates can lose dual feasibility to rounding, so the
            // best acceptable point is kept as a fallback
            if self.acceptable(&res) && best.as_ref().is_none_or(|b| res.relgap < b.1.relgap) {
                best = Some((it.clone(), res.clone(), iter));
            }
            stalled = if res.relgap > 0.25 * prev_gap {
                stalled + 1
            } else {
                0
            };
            prev_gap = res.relgap;
            if stalled >= 3 {
                if let Some((bit, bres, biter)) = &best {
                    return self.finish(bit, bres, Status::Optimal, *biter, None);
                }
            }
            if res.pinf.is_some_and(|v| v <= st.feas_tol) {
                return self.finish(&it, &res, Status::Infeasible, iter, None);
            }
            if res.dinf.is_some_and(|v| v <= st.feas_tol) {
                return self.finish(&it, &res, Status::Unbounded, iter, None);
            }
            if iter == st.max_iter {
                return self.stop(&it, &res, best.as_ref(), Status::MaxIterations, iter, None);
            }

            let Some(kkt) = Kkt::factor(sf, &scaling) else {
                return self.stop(
                    &it,
                    &res,
                    best.as_ref(),
                    Status::Numerical,
                    iter,
                    Some(iter),
                );
            };
            let Some((x1, y1, z1, wz1)) = kkt.solve(&neg_c, &sf.b, &scaling.apply_wit(&self.h))
            else {
                return self.stop(
                    &it,
                    &res,
                    best.as_ref(),
                    Status::Numerical,
                    iter,
                    Some(iter),
                );
            };
            let rzs = scaling.apply_wit(&res.rz);
            let denom = -(wz1.dot(&wz1) + it.kappa / it.tau);

            let lam = scaling.lambda();
            let lam_sq = jordan(&lam, &lam);
            let mu = (it.s.dot(&it.z) + it.tau * it.kappa) / (degree + 1.0);
            let e = ConeVec::identity(self.lin_dim(), &self.dims);

            let mut sigma = 0.0;
            let mut affine: Option<(ConeVec, ConeVec, f64, f64)> = None;
            let mut step = None;
            for corrector in [false, true] {
                let eta = if corrector { sigma } else { 0.0 };
                let mut rc = lam_sq.clone();
                rc.scale(-1.0);
                let mut rtk = -it.tau * it.kappa;
                if let Some((dsa, dza, dta, dka)) = &affine {
                    rc.axpy(-1.0, &jordan(dsa, dza));
                    rc.axpy(sigma * mu, &e);
                    rtk += -dta * dka + sigma * mu;
                }
                let u = lambda_solve(&scaling, &rc);
                // scaled third row: −(1 − η) W⁻ᵀ rz − u
                let mut r3 = u;
                r3.scale(-1.0);
                r3.axpy(-(1.0 - eta), &rzs);
                let r1 = &res.rx * (-(1.0 - eta));
                let r2 = &res.ry * (-(1.0 - eta));
                let Some((x2, y2, z2, wz2)) = kkt.solve(&r1, &r2, &r3) else {
                    return self.stop(
                        &it,
                        &res,
                        best.as_ref(),
                        Status::Numerical,
                        iter,
                        Some(iter),
                    );
                };
                let num = -(1.0 - eta) * res.rt
                    - rtk / it.tau
                    - (sf.c.dot(&x2) + sf.b.dot(&y2) + self.h.dot(&z2));
                let dtau = num / denom;
                let dx = x2 + &x1 * dtau;
                let dy = y2 + &y1 * dtau;
                let mut dz = z2;
                dz.axpy(dtau, &z1);
                let mut dzt = wz2;
                dzt.axpy(dtau, &wz1);
                let dkappa = (rtk - it.kappa * dtau) / it.tau;
                // ds from the linearized primal equation rather than
                // Wᵀ(u − W dz), which cancels badly once W is ill-conditioned
                let mut ds = g_times(sf, &dx);
                ds.scale(-1.0);
                ds.axpy(-(1.0 - eta), &res.rz);
                ds.axpy(dtau, &self.h);
                ds.symmetrize();
                let dst = scaling.apply_wit(&ds);

                let mut amax = max_step(&scaling, &dst).min(max_step(&scaling, &dzt));
                if dtau < 0.0 {
                    amax = amax.min(-it.tau / dtau);
                }
                if dkappa < 0.0 {
                    amax = amax.min(-it.kappa / dkappa);
                }
                if amax.is_nan() {
                    return self.stop(
                        &it,
                        &res,
                        best.as_ref(),
                        Status::Numerical,
                        iter,
                        Some(iter),
                    );
                }
                if !corrector {
                    let a = amax.min(1.0);
                    sigma = (1.0 - a).powi(3);
                    affine = Some((dst, dzt, dtau, dkappa));
                } else {
                    let alpha = (st.step_fraction * amax).min(1.0);
                    step = Some((alpha, dx, dy, dz, ds, dtau, dkappa));
                }
            }
            let (alpha, dx, dy, dz, ds, dtau, dkappa) = step.expect("corrector step computed");
            if !(alpha > 1e-14) {
                return self.stop(
                    &it,
                    &res,
                    best.as_ref(),
                    Status::Numerical,
                    iter,
                    Some(iter),
                );
            }

            it.x.axpy(alpha, &dx, 1.0);
            it.y.axpy(alpha, &dy, 1.0);
            it.z.axpy(alpha, &dz);
            it.s.axpy(alpha, &ds);
            it.z.symmetrize();
            it.s.symmetrize();
            it.tau += alpha * dtau;
            it.kappa += alpha * dkappa;

            // recomputed from (s, z) rather than updated in the scaled space,
            // which drifts over many iterations
            scaling = match Scaling::new(&it.s, &it.z) {
                Some(sc) => sc,
                None => {
                    let res = self.residuals(&it);
                    return self.stop(
                        &it,
                        &res,
                        best.as_ref(),
                        Status::Numerical,
                        iter + 1,
                        Some(iter + 1),
                    );
                }
            };
        }
        unreachable!("loop returns at max_iter")
    }
}
