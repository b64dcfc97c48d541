//! Problem data for the conic solver.
//!
//! A problem is stated in "affine constraint" form over a vector of free
//! decision variables `x`:
//!
//! ```text
//! minimize    cᵀx
//! subject to  aᵢᵀx + kᵢ  = 0          (equalities)
//!             gⱼᵀx + hⱼ  ≥ 0          (scalar inequalities)
//!             F₀ + Σₖ xₖ Fₖ ⪰ 0       (linear matrix inequalities)
//! ```
//!
//! Internally this is mapped to the standard conic form
//! `min cᵀx s.t. Ax = b, Gx + s = h, s ∈ K` with `K` a product of the
//! nonnegative orthant and PSD cones.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::SolverError;

/// Sparse linear expression `Σ coeff·x[var] + constant`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: value,
        }
    }

    pub fn var(index: usize) -> Self {
        Self {
            terms: vec![(index, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(mut self, index: usize, coeff: f64) -> Self {
        self.add_term(index, coeff);
        self
    }

    pub fn plus(mut self, value: f64) -> Self {
        self.constant += value;
        self
    }

    pub fn add_term(&mut self, index: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((index, coeff));
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + self.constant
    }

    /// Sorts terms by variable and merges duplicates.
    pub(crate) fn normalized(&self) -> Vec<(usize, f64)> {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (i, a) in terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += a,
                _ => out.push((i, a)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        out
    }
}

/// Symmetric sparse matrix stored as upper-triangle triplets `(i, j, v)` with
/// `i <= j`; the entry is mirrored to `(j, i)` when `i != j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SymSparse {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `v` at `(i, j)` and `(j, i)`.
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.entries.push((a, b, v));
        }
    }

    pub fn with(mut self, i: usize, j: usize, v: f64) -> Self {
        self.push(i, j, v);
        self
    }

    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(dim, dim);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    /// `⟨self, m⟩ = Tr(self · m)` for a symmetric `m`.
    pub fn inner(&self, m: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| {
                if i == j {
                    v * m[(i, i)]
                } else {
                    v * (m[(i, j)] + m[(j, i)])
                }
            })
            .sum()
    }

    fn normalized(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_by_key(|t| (t.0, t.1));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (i, j, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|t| t.2 != 0.0);
        out
    }
}

/// Linear matrix inequality `F₀ + Σₖ xₖ Fₖ ⪰ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lmi {
    pub dim: usize,
    pub constant: SymSparse,
    pub terms: Vec<(usize, SymSparse)>,
}

impl Lmi {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            constant: SymSparse::new(),
            terms: Vec::new(),
        }
    }

    /// Adds `coeff · x[var]` at `(i, j)` (and `(j, i)`).
    pub fn add_var_entry(&mut self, var: usize, i: usize, j: usize, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        match self.terms.iter_mut().find(|t| t.0 == var) {
            Some(t) => t.1.push(i, j, coeff),
            None => self.terms.push((var, SymSparse::new().with(i, j, coeff))),
        }
    }

    /// Adds an affine expression at `(i, j)` (and `(j, i)`).
    pub fn add_expr_entry(&mut self, i: usize, j: usize, expr: &LinExpr) {
        self.constant.push(i, j, expr.constant);
        for &(var, a) in &expr.terms {
            self.add_var_entry(var, i, j, a);
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.to_dense(self.dim);
        for (var, f) in &self.terms {
            for &(i, j, v) in &f.entries {
                m[(i, j)] += v * x[*var];
                if i != j {
                    m[(j, i)] += v * x[*var];
                }
            }
        }
        m
    }
}

/// A conic program in affine-constraint form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub num_vars: usize,
    pub cost: Vec<f64>,
    pub equalities: Vec<LinExpr>,
    pub inequalities: Vec<LinExpr>,
    pub lmis: Vec<Lmi>,
}

impl Problem {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            cost: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    pub fn add_var(&mut self) -> usize {
        self.num_vars += 1;
        self.cost.push(0.0);
        self.num_vars - 1
    }

    /// Adds `expr = 0`; returns the equality index.
    pub fn add_eq(&mut self, expr: LinExpr) -> usize {
        self.equalities.push(expr);
        self.equalities.len() - 1
    }

    /// Adds `expr ≥ 0`; returns the inequality index.
    pub fn add_ineq(&mut self, expr: LinExpr) -> usize {
        self.inequalities.push(expr);
        self.inequalities.len() - 1
    }

    /// Adds `F(x) ⪰ 0`; returns the LMI index.
    pub fn add_lmi(&mut self, lmi: Lmi) -> usize {
        self.lmis.push(lmi);
        self.lmis.len() - 1
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.cost.len() != self.num_vars {
            return Err(SolverError::Malformed(format!(
                "cost has {} entries for {} variables",
                self.cost.len(),
                self.num_vars
            )));
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(SolverError::Malformed("non-finite cost coefficient".into()));
        }
        let check_expr = |kind: &str, k: usize, e: &LinExpr| -> Result<(), SolverError> {
            if !e.constant.is_finite() || e.terms.iter().any(|t| !t.1.is_finite()) {
                return Err(SolverError::Malformed(format!(
                    "{kind} {k}: non-finite coefficient"
                )));
            }
            if let Some(t) = e.terms.iter().find(|t| t.0 >= self.num_vars) {
                return Err(SolverError::Malformed(format!(
                    "{kind} {k}: variable {} out of range",
                    t.0
                )));
            }
            Ok(())
        };
        for (k, e) in self.equalities.iter().enumerate() {
            check_expr("equality", k, e)?;
        }
        for (k, e) in self.inequalities.iter().enumerate() {
            check_expr("inequality", k, e)?;
        }
        for (k, lmi) in self.lmis.iter().enumerate() {
            if lmi.dim == 0 {
                return Err(SolverError::Malformed(format!("lmi {k}: zero dimension")));
            }
            let entries = lmi
                .constant
                .entries
                .iter()
                .chain(lmi.terms.iter().flat_map(|t| t.1.entries.iter()));
            for &(i, j, v) in entries {
                if i >= lmi.dim || j >= lmi.dim {
                    return Err(SolverError::Malformed(format!(
                        "lmi {k}: entry ({i}, {j}) outside {0}x{0} block",
                        lmi.dim
                    )));
                }
                if !v.is_finite() {
                    return Err(SolverError::Malformed(format!("lmi {k}: non-finite entry")));
                }
            }
            if let Some(t) = lmi.terms.iter().find(|t| t.0 >= self.num_vars) {
                return Err(SolverError::Malformed(format!(
                    "lmi {k}: variable {} out of range",
                    t.0
                )));
            }
        }
        Ok(())
    }

    /// Serializes the problem as pretty JSON for offline debugging.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SolverError> {
        let p: Problem =
            serde_json::from_str(text).map_err(|e| SolverError::Malformed(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Standard-form data derived from a [`Problem`]:
/// `min cᵀx s.t. Ax = b, Gx + s = h, s ∈ ℝ₊ˡ × Π Sⁿʲ₊`.
#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    pub n: usize,
    /// Cost normalized to unit max-norm; `cost_scale` restores it.
    pub c: DVector<f64>,
    pub cost_scale: f64,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Rows of `G` for the orthant part, sparse.
    pub g_lin: Vec<Vec<(usize, f64)>>,
    pub h_lin: DVector<f64>,
    pub psd: Vec<PsdData>,
}

/// Upper-triangle `(row, col, value)` entries of one coefficient matrix.
pub(crate) type Triplets = Vec<(usize, usize, f64)>;

#[derive(Debug, Clone)]
pub(crate) struct PsdData {
    pub dim: usize,
    pub h: DMatrix<f64>,
    /// `(var, Gₖ)` with `Gₖ = -Fₖ`, upper-triangle triplets.
    pub g: Vec<(usize, Triplets)>,
}

impl StandardForm {
    pub fn from_problem(p: &Problem) -> Self {
        let n = p.num_vars;
        let c = DVector::from_column_slice(&p.cost);
        let cost_scale = if c.amax() > 0.0 { c.amax() } else { 1.0 };
        let c = c / cost_scale;
        let m = p.equalities.len();
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        for (r, e) in p.equalities.iter().enumerate() {
            for (i, v) in e.normalized() {
                a[(r, i)] = v;
            }
            b[r] = -e.constant;
        }
        let g_lin = p
            .inequalities
            .iter()
            .map(|e| e.normalized().into_iter().map(|(i, v)| (i, -v)).collect())
            .collect();
        let h_lin = DVector::from_iterator(
            p.inequalities.len(),
            p.inequalities.iter().map(|e| e.constant),
        );
        let psd = p
            .lmis
            .iter()
            .map(|lmi| {
                let mut merged: Vec<(usize, SymSparse)> = Vec::new();
                for (var, f) in &lmi.terms {
                    match merged.iter_mut().find(|t| t.0 == *var) {
                        Some(t) => t.1.entries.extend_from_slice(&f.entries),
                        None => merged.push((*var, f.clone())),
                    }
                }
                merged.sort_by_key(|t| t.0);
                let g = merged
                    .into_iter()
                    .map(|(var, f)| {
                        let e: Vec<_> = f
                            .normalized()
                            .into_iter()
                            .map(|(i, j, v)| (i, j, -v))
                            .collect();
                        (var, e)
                    })
                    .filter(|t| !t.1.is_empty())
                    .collect();
                PsdData {
                    dim: lmi.dim,
                    h: lmi.constant.to_dense(lmi.dim),
                    g,
                }
            })
            .collect();
        Self {
            n,
            c,
            cost_scale,
            a,
            b,
            g_lin,
            h_lin,
            psd,
        }
    }
}
