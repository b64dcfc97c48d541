//! Factorization and solution of the scaled KKT system
//!
//! ```text
//! [ 0  Aᵀ   Gᵀ  ] [dx]   [r1]
//! [ A  0    0   ] [dy] = [r2]
//! [ G  0  -WᵀW  ] [dz]   [r3]
//! ```
//!
//! by eliminating `dz` and factoring the Schur complement
//! `M = Gᵀ (WᵀW)⁻¹ G + ρ AᵀA`, then `A M⁻¹ Aᵀ`. The `ρ AᵀA` term does not
//! change the solution (`A dx = r2` is enforced) but keeps `M` well
//! conditioned along directions fixed only by the equality rows.
//!
//! The third row is passed pre-scaled as `W⁻ᵀ r3`, and `dz` is recovered
//! through `W dz = W⁻ᵀ G dx − W⁻ᵀ r3`. Going through `(WᵀW)⁻¹` instead
//! squares the conditioning of `W` and stalls the solver near optimality.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::cone::{g_times, gt_times, ConeVec, Scaling};
use crate::problem::StandardForm;

const REFINE_ROUNDS: usize = 4;

enum Factor {
    Schur {
        m: Cholesky<f64, Dyn>,
        /// `M⁻¹ Aᵀ`
        mi_at: DMatrix<f64>,
        s: SchurS,
    },
    Augmented(LU<f64, Dyn, Dyn>),
}

enum SchurS {
    None,
    Chol(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

pub(crate) struct Kkt<'a> {
    sf: &'a StandardForm,
    scaling: &'a Scaling,
    factor: Factor,
    /// `M + ρ AᵀA`, kept for refinement residuals.
    m: DMatrix<f64>,
    /// Weight of the `ρ AᵀA` term added to `M`.
    rho: f64,
}

/// Builds `M = Gᵀ (WᵀW)⁻¹ G`.
fn schur_matrix(sf: &StandardForm, sc: &Scaling) -> DMatrix<f64> {
    let n = sf.n;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (row, d) in sf.g_lin.iter().zip(sc.d.iter()) {
        let w = 1.0 / (d * d);
        for &(i, a) in row {
            for &(j, b) in row {
                m[(i, j)] += w * a * b;
            }
        }
    }
    for (blk, p) in sf.psd.iter().zip(&sc.psd) {
        let r = &p.rinv2;
        let dim = blk.dim;
        let mut t = DMatrix::<f64>::zeros(dim, dim);
        for (li, (lvar, lent)) in blk.g.iter().enumerate() {
            t.fill(0.0);
            for &(i, j, v) in lent {
                t.ger(v, &r.column(i), &r.column(j), 1.0);
                if i != j {
                    t.ger(v, &r.column(j), &r.column(i), 1.0);
                }
            }
            for (kvar, kent) in &blk.g[..=li] {
                let mut acc = 0.0;
                for &(i, j, v) in kent {
                    acc += if i == j {
                        v * t[(i, i)]
                    } else {
                        v * (t[(i, j)] + t[(j, i)])
                    };
                }
                m[(*kvar, *lvar)] += acc;
                if kvar != lvar {
                    m[(*lvar, *kvar)] += acc;
                }
            }
        }
    }
    m
}

fn regularized_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().amax().max(1e-300);
    for delta in [0.0, 1e-14, 1e-12, 1e-10] {
        let mut mm = m.clone();
        if delta > 0.0 {
            for i in 0..mm.nrows() {
                mm[(i, i)] += delta * scale;
            }
        }
        if let Some(c) = Cholesky::new(mm) {
            return Some(c);
        }
    }
    None
}

impl<'a> Kkt<'a> {
    pub fn factor(sf: &'a StandardForm, scaling: &'a Scaling) -> Option<Self> {
        let mut m = schur_matrix(sf, scaling);
        let rho = if sf.a.nrows() > 0 {
            let ata = sf.a.transpose() * &sf.a;
            let rho = m.diagonal().amax() / ata.diagonal().amax().max(1e-300);
            m += ata * rho;
            rho
        } else {
            0.0
        };
        let factor = match regularized_cholesky(&m) {
            Some(mc) => {
                let at = sf.a.transpose();
                let mi_at = mc.solve(&at);
                let s = if sf.a.nrows() == 0 {
                    SchurS::None
                } else {
                    let smat = &sf.a * &mi_at;
                    let smat = (&smat + smat.transpose()) * 0.5;
                    match regularized_cholesky(&smat) {
                        Some(c) => SchurS::Chol(c),
                        None => SchurS::Lu(smat.lu()),
                    }
                };
                Factor::Schur { m: mc, mi_at, s }
            }
            None => {
                let n = sf.n;
                let p = sf.a.nrows();
                let mut k = DMatrix::zeros(n + p, n + p);
                k.view_mut((0, 0), (n, n)).copy_from(&m);
                k.view_mut((0, n), (n, p)).copy_from(&sf.a.transpose());
                k.view_mut((n, 0), (p, n)).copy_from(&sf.a);
                Factor::Augmented(k.lu())
            }
        };
        Some(Self {
            sf,
            scaling,
            factor,
            m,
            rho,
        })
    }

    fn solve_reduced(
        &self,
        q1: &DVector<f64>,
        r2: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        match &self.factor {
            Factor::Schur { m, mi_at, s } => {
                let miq = m.solve(q1);
                let dy = match s {
                    SchurS::None => DVector::zeros(0),
                    SchurS::Chol(c) => c.solve(&(&self.sf.a * &miq - r2)),
                    SchurS::Lu(lu) => lu.solve(&(&self.sf.a * &miq - r2))?,
                };
                let dx = if dy.is_empty() {
                    miq
                } else {
                    miq - mi_at * &dy
                };
                Some((dx, dy))
            }
            Factor::Augmented(lu) => {
                let n = self.sf.n;
                let mut rhs = DVector::zeros(n + r2.len());
                rhs.rows_mut(0, n).copy_from(q1);
                rhs.rows_mut(n, r2.len()).copy_from(r2);
                let sol = lu.solve(&rhs)?;
                Some((
                    sol.rows(0, n).into_owned(),
                    sol.rows(n, r2.len()).into_owned(),
                ))
            }
        }
    }

    /// Solves `[M Aᵀ; A 0] [dx; dy] = [q1; r2]` with iterative refinement
    /// against the explicit matrix.
    fn solve_refined(
        &self,
        q1: &DVector<f64>,
        r2: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let a = &self.sf.a;
        let (mut dx, mut dy) = self.solve_reduced(q1, r2)?;
        let scale = q1.amax().max(r2.amax()).max(f64::MIN_POSITIVE);
        let mut prev = f64::INFINITY;
        for _ in 0..REFINE_ROUNDS {
            let mut e1 = q1 - &self.m * &dx;
            if !dy.is_empty() {
                e1 -= a.transpose() * &dy;
            }
            let e2 = r2 - a * &dx;
            let err = e1.amax().max(e2.amax());
            if err <= 1e-15 * scale || err >= prev {
                break;
            }
            prev = err;
            let (cx, cy) = self.solve_reduced(&e1, &e2)?;
            dx += cx;
            dy += cy;
        }
        Some((dx, dy))
    }

    /// `dz = W⁻¹(W⁻ᵀG dx − r3s)`, returned together with `W dz`.
    fn scaled_dz(&self, dx: &DVector<f64>, r3s: Option<&ConeVec>) -> (ConeVec, ConeVec) {
        let mut dzt = self.scaling.apply_wit(&g_times(self.sf, dx));
        if let Some(r3s) = r3s {
            dzt.axpy(-1.0, r3s);
        }
        dzt.symmetrize();
        let mut dz = self.scaling.apply_wi(&dzt);
        dz.symmetrize();
        (dz, dzt)
    }

    fn solve_once(
        &self,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
        r3s: Option<&ConeVec>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        // M dx + Aᵀ dy = r1 + Gᵀ W⁻¹ r3s
        let mut q1 = r1.clone();
        if let Some(r3s) = r3s {
            q1 += gt_times(self.sf, &self.scaling.apply_wi(r3s));
        }
        if self.rho > 0.0 {
            q1 += self.sf.a.transpose() * r2 * self.rho;
        }
        self.solve_refined(&q1, r2)
    }

    /// Solves the full system with the third block row given in scaled
    /// form, `r3s = W⁻ᵀ r3`. Returns `(dx, dy, dz, W dz)`.
    ///
    /// The third row holds by construction of `W dz`, which only ever
    /// applies single factors of `W`; refinement corrects the first two.
    pub fn solve(
        &self,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
        r3s: &ConeVec,
    ) -> Option<(DVector<f64>, DVector<f64>, ConeVec, ConeVec)> {
        let (mut dx, mut dy) = self.solve_once(r1, r2, Some(r3s))?;
        let (mut dz, mut dzt) = self.scaled_dz(&dx, Some(r3s));
        let scale = r1.amax().max(r2.amax()).max(f64::MIN_POSITIVE);
        let mut prev = f64::INFINITY;
        for _ in 0..REFINE_ROUNDS {
            let e1 = r1 - self.sf.a.transpose() * &dy - gt_times(self.sf, &dz);
            let e2 = r2 - &self.sf.a * &dx;
            let err = e1.amax().max(e2.amax());
            if err <= 1e-15 * scale || err >= prev {
                break;
            }
            prev = err;
            let (cx, cy) = self.solve_once(&e1, &e2, None)?;
            let (cz, czt) = self.scaled_dz(&cx, None);
            dx += cx;
            dy += cy;
            dz.axpy(1.0, &cz);
            dzt.axpy(1.0, &czt);
        }
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((dx, dy, dz, dzt))
    }
}
