//! Cone algebra for the product `ℝ₊ˡ × Sⁿ¹₊ × … × Sⁿᵏ₊`: vectors, Jordan
//! products, Nesterov–Todd scaling and step-to-boundary computations.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

use crate::problem::StandardForm;

/// Element of the cone's ambient space.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConeVec {
    pub lin: DVector<f64>,
    pub mats: Vec<DMatrix<f64>>,
}

impl ConeVec {
    pub fn zeros(lin: usize, dims: &[usize]) -> Self {
        Self {
            lin: DVector::zeros(lin),
            mats: dims.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
        }
    }

    /// Identity element `e`.
    pub fn identity(lin: usize, dims: &[usize]) -> Self {
        Self {
            lin: DVector::from_element(lin, 1.0),
            mats: dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.lin.dot(&other.lin)
            + self
                .mats
                .iter()
                .zip(&other.mats)
                .map(|(a, b)| a.dot(b))
                .sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        self.lin.axpy(alpha, &other.lin, 1.0);
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.zip_apply(b, |x, y| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.lin *= alpha;
        for m in &mut self.mats {
            *m *= alpha;
        }
    }

    pub fn symmetrize(&mut self) {
        for m in &mut self.mats {
            let t = m.transpose();
            *m += t;
            *m *= 0.5;
        }
    }

    /// Smallest `t` such that `self + t·e` lies in the closed cone, i.e.
    /// minus the smallest eigenvalue over all blocks.
    pub fn max_violation(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for &v in self.lin.iter() {
            worst = worst.max(-v);
        }
        for m in &self.mats {
            let eig = SymmetricEigen::new(m.clone());
            worst = worst.max(-eig.eigenvalues.min());
        }
        worst
    }
}

/// `G x` for the standard form.
pub(crate) fn g_times(sf: &StandardForm, x: &DVector<f64>) -> ConeVec {
    let lin = DVector::from_iterator(
        sf.g_lin.len(),
        sf.g_lin
            .iter()
            .map(|row| row.iter().map(|&(i, v)| v * x[i]).sum::<f64>()),
    );
    let mats = sf
        .psd
        .iter()
        .map(|blk| {
            let mut m = DMatrix::zeros(blk.dim, blk.dim);
            for (var, entries) in &blk.g {
                let xv = x[*var];
                if xv == 0.0 {
                    continue;
                }
                for &(i, j, v) in entries {
                    m[(i, j)] += v * xv;
                    if i != j {
                        m[(j, i)] += v * xv;
                    }
                }
            }
            m
        })
        .collect();
    ConeVec { lin, mats }
}

/// `Gᵀ z` for the standard form.
pub(crate) fn gt_times(sf: &StandardForm, z: &ConeVec) -> DVector<f64> {
    let mut out = DVector::zeros(sf.n);
    for (row, &zv) in sf.g_lin.iter().zip(z.lin.iter()) {
        for &(i, v) in row {
            out[i] += v * zv;
        }
    }
    for (blk, zm) in sf.psd.iter().zip(&z.mats) {
        for (var, entries) in &blk.g {
            let mut acc = 0.0;
            for &(i, j, v) in entries {
                acc += if i == j {
                    v * zm[(i, i)]
                } else {
                    v * (zm[(i, j)] + zm[(j, i)])
                };
            }
            out[*var] += acc;
        }
    }
    out
}

pub(crate) fn h_vec(sf: &StandardForm) -> ConeVec {
    ConeVec {
        lin: sf.h_lin.clone(),
        mats: sf.psd.iter().map(|b| b.h.clone()).collect(),
    }
}

/// Nesterov–Todd scaling for one PSD block, with `W(U) = rᵀ U r`,
/// `s = r Λ rᵀ` and `z = r⁻ᵀ Λ r⁻¹`. Only `r⁻ᵀ` is kept.
#[derive(Debug, Clone)]
pub(crate) struct PsdScaling {
    /// `r⁻ᵀ`
    pub rti: DMatrix<f64>,
    pub lambda: DVector<f64>,
    /// `(r rᵀ)⁻¹ = rti rtiᵀ`, cached for the Hessian products.
    pub rinv2: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    /// `W = diag(d)` on the orthant.
    pub d: DVector<f64>,
    pub lambda_lin: DVector<f64>,
    pub psd: Vec<PsdScaling>,
}

/// NT scaling of a strictly feasible pair `(s, z)`, given as matrices.
fn nt_pair(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let ls = Cholesky::new(s.clone())?.l();
    let lz = Cholesky::new(z.clone())?.l();
    let prod = lz.transpose() * &ls;
    let svd = SVD::new(prod, true, true);
    let u = svd.u?;
    let sig = svd.singular_values;
    if sig.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return None;
    }
    let isq = sig.map(|x| 1.0 / x.sqrt());
    let rti = lz * u * DMatrix::from_diagonal(&isq);
    Some((rti, sig))
}

impl PsdScaling {
    fn from_parts(rti: DMatrix<f64>, lambda: DVector<f64>) -> Self {
        let rinv2 = &rti * rti.transpose();
        Self { rti, lambda, rinv2 }
    }
}

impl Scaling {
    /// Computes the scaling directly from strictly interior `s`, `z`.
    pub fn new(s: &ConeVec, z: &ConeVec) -> Option<Self> {
        if s.lin.iter().chain(z.lin.iter()).any(|&v| !(v > 0.0)) {
            return None;
        }
        let d = s.lin.zip_map(&z.lin, |a, b| (a / b).sqrt());
        let lambda_lin = s.lin.zip_map(&z.lin, |a, b| (a * b).sqrt());
        let mut psd = Vec::with_capacity(s.mats.len());
        for (sm, zm) in s.mats.iter().zip(&z.mats) {
            let (rti, lam) = nt_pair(sm, zm)?;
            psd.push(PsdScaling::from_parts(rti, lam));
        }
        Some(Self { d, lambda_lin, psd })
    }

    pub fn lambda(&self) -> ConeVec {
        ConeVec {
            lin: self.lambda_lin.clone(),
            mats: self
                .psd
                .iter()
                .map(|p| DMatrix::from_diagonal(&p.lambda))
                .collect(),
        }
    }

    /// `W⁻ᵀ u`
    pub fn apply_wit(&self, u: &ConeVec) -> ConeVec {
        ConeVec {
            lin: u.lin.component_div(&self.d),
            mats: self
                .psd
                .iter()
                .zip(&u.mats)
                .map(|(p, m)| p.rti.transpose() * m * &p.rti)
                .collect(),
        }
    }

    /// `W⁻¹ u`
    pub fn apply_wi(&self, u: &ConeVec) -> ConeVec {
        ConeVec {
            lin: u.lin.component_div(&self.d),
            mats: self
                .psd
                .iter()
                .zip(&u.mats)
                .map(|(p, m)| &p.rti * m * p.rti.transpose())
                .collect(),
        }
    }
}

/// Jordan product `a ∘ b`.
pub(crate) fn jordan(a: &ConeVec, b: &ConeVec) -> ConeVec {
    ConeVec {
        lin: a.lin.component_mul(&b.lin),
        mats: a
            .mats
            .iter()
            .zip(&b.mats)
            .map(|(x, y)| {
                let p = x * y;
                (&p + p.transpose()) * 0.5
            })
            .collect(),
    }
}

/// Solves `λ ∘ u = r` for `u`, where `λ` is the scaled point (diagonal on
/// each PSD block).
pub(crate) fn lambda_solve(sc: &Scaling, r: &ConeVec) -> ConeVec {
    ConeVec {
        lin: r.lin.component_div(&sc.lambda_lin),
        mats: sc
            .psd
            .iter()
            .zip(&r.mats)
            .map(|(p, m)| {
                let l = &p.lambda;
                DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| 2.0 * m[(i, j)] / (l[i] + l[j]))
            })
            .collect(),
    }
}

/// Largest `α` with `λ + α·d` in the cone (∞ if unbounded), `λ` the
/// current scaled point.
pub(crate) fn max_step(sc: &Scaling, dir: &ConeVec) -> f64 {
    let mut alpha = f64::INFINITY;
    for (&l, &d) in sc.lambda_lin.iter().zip(dir.lin.iter()) {
        if d < 0.0 {
            alpha = alpha.min(-l / d);
        }
    }
    for (p, m) in sc.psd.iter().zip(&dir.mats) {
        let isq = p.lambda.map(|x| 1.0 / x.sqrt());
        let mut t = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * isq[i] * isq[j]);
        let tt = t.transpose();
        t += tt;
        t *= 0.5;
        let min = SymmetricEigen::new(t).eigenvalues.min();
        if min < 0.0 {
            alpha = alpha.min(-1.0 / min);
        }
    }
    alpha
}
