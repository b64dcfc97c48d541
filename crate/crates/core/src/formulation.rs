//! Relaxed semidefinite dispatch program: trace constraints on the voltage
//! outer-product matrix, Schur-complement blocks for the epigraph terms, box
//! and power-factor constraints on the setpoints, and the composite
//! objective.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use oid_conic::{LinExpr, Lmi, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};
use crate::feeder::{build_loss_matrices, FeederModel};
use crate::scenario::{InverterSpec, Scenario, ScenarioStep, VoltageLimits};
use crate::strategies::StrategyKind;

/// Either one value shared by every house or one value per house.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerHouse {
    Uniform(f64),
    Each(Vec<f64>),
}

impl Default for PerHouse {
    fn default() -> Self {
        PerHouse::Uniform(0.0)
    }
}

impl PerHouse {
    pub fn get(&self, house: usize) -> f64 {
        match self {
            PerHouse::Uniform(v) => *v,
            PerHouse::Each(v) => v[house],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            PerHouse::Uniform(v) => vec![*v],
            PerHouse::Each(v) => v.clone(),
        }
    }

    fn check(&self, name: &str, houses: usize, nonnegative: bool) -> Result<()> {
        if let PerHouse::Each(v) = self {
            if v.len() != houses {
                return Err(OidError::Spec(format!(
                    "{name}: expected {houses} values, got {}",
                    v.len()
                )));
            }
        }
        for v in self.values() {
            if !v.is_finite() || (nonnegative && v < 0.0) {
                return Err(OidError::Spec(format!("{name}: invalid value {v}")));
            }
        }
        Ok(())
    }
}

/// How the power-factor cut `|Q| ≤ tan θ·(P̄ − P_c)` is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfEncoding {
    #[default]
    TwoInequalities,
    Cone,
}

fn one() -> f64 {
    1.0
}

fn is_false(b: &bool) -> bool {
    !b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub strategy: StrategyKind,
    #[serde(default = "one")]
    pub c_rho: f64,
    #[serde(default)]
    pub c_phi: f64,
    #[serde(default)]
    pub c_nu: f64,
    #[serde(default)]
    pub curtail_a: PerHouse,
    #[serde(default)]
    pub curtail_b: PerHouse,
    #[serde(default)]
    pub lambda: PerHouse,
    #[serde(default)]
    pub lambda_p: f64,
    #[serde(default)]
    pub lambda_q: f64,
    #[serde(default)]
    pub enforce_pf: bool,
    #[serde(default)]
    pub pf_encoding: PfEncoding,
    #[serde(default, skip_serializing_if = "is_false")]
    pub pin_curtailment: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub pin_reactive: bool,
    /// Overrides the scenario's voltage limits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<VoltageLimits>,
    /// Houses allowed to deviate from `(P̄, 0)`; `None` allows all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<bool>>,
}

impl Default for DispatchSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            strategy: StrategyKind::Oid,
            c_rho: 1.0,
            c_phi: 0.0,
            c_nu: 0.0,
            curtail_a: PerHouse::default(),
            curtail_b: PerHouse::default(),
            lambda: PerHouse::default(),
            lambda_p: 0.0,
            lambda_q: 0.0,
            enforce_pf: false,
            pf_encoding: PfEncoding::default(),
            pin_curtailment: false,
            pin_reactive: false,
            limits: None,
            selection: None,
        }
    }
}

impl DispatchSpec {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| OidError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| OidError::Parse {
            path: format!("{}:{}", path.display(), e.line()),
            message: e.to_string(),
        })
    }

    pub fn validate(&self, houses: usize) -> Result<()> {
        for (name, v) in [
            ("c_rho", self.c_rho),
            ("c_phi", self.c_phi),
            ("c_nu", self.c_nu),
            ("lambda_p", self.lambda_p),
            ("lambda_q", self.lambda_q),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(OidError::Spec(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.c_rho <= 0.0 {
            return Err(OidError::Spec("c_rho must be positive".into()));
        }
        self.curtail_a.check("curtail_a", houses, true)?;
        self.curtail_b.check("curtail_b", houses, false)?;
        self.lambda.check("lambda", houses, true)?;
        if let Some(sel) = &self.selection {
            if sel.len() != houses {
                return Err(OidError::Spec(format!(
                    "selection: expected {houses} entries"
                )));
            }
        }
        if let Some(l) = &self.limits {
            l.validate()?;
        }
        Ok(())
    }

    pub fn limits_for(&self, scenario: &Scenario) -> VoltageLimits {
        self.limits.unwrap_or(scenario.limits)
    }

    /// Same weights, every pin and selection mask removed.
    pub fn without_pins(&self) -> Self {
        Self {
            strategy: StrategyKind::Oid,
            pin_curtailment: false,
            pin_reactive: false,
            selection: None,
            ..self.clone()
        }
    }
}

/// Node-indexed helper matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FormulationMatrices {
    /// `½(Yₙ + Yₙᴴ)` with `Yₙ = eₙeₙᵀY`.
    pub active: Vec<DMatrix<Complex64>>,
    /// `(j/2)(Yₙ − Yₙᴴ)`.
    pub reactive: Vec<DMatrix<Complex64>>,
    /// `I − 𝟏𝟏ᵀ/(N+1)`.
    pub projector: DMatrix<f64>,
    pub loss: DMatrix<f64>,
}

impl FormulationMatrices {
    pub fn new(model: &FeederModel) -> Self {
        let n = model.num_nodes();
        let y = &model.admittance;
        let mut active = Vec::with_capacity(n);
        let mut reactive = Vec::with_capacity(n);
        let half = Complex64::new(0.5, 0.0);
        let half_j = Complex64::new(0.0, 0.5);
        for node in 0..n {
            let mut yn = DMatrix::<Complex64>::zeros(n, n);
            yn.row_mut(node).copy_from(&y.row(node));
            let ynh = yn.adjoint();
            active.push((&yn + &ynh) * half);
            reactive.push((&yn - &ynh) * half_j);
        }
        let projector = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        Self {
            active,
            reactive,
            projector,
            loss: build_loss_matrices(model).total,
        }
    }

    /// `eₙeₙᵀ`.
    pub fn selector(&self, node: usize) -> DMatrix<f64> {
        let n = self.projector.nrows();
        let mut m = DMatrix::zeros(n, n);
        m[(node, node)] = 1.0;
        m
    }
}

/// Decision variables of the relaxed program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    /// `Re Vᵢⱼ`, `i ≤ j`.
    Re(usize, usize),
    /// `Im Vᵢⱼ`, `i < j`.
    Im(usize, usize),
    Curtail(usize),
    Reactive(usize),
    ReactivePlus(usize),
    ReactiveMinus(usize),
    CostEpigraph(usize),
    GroupEpigraph(usize),
    Deviation,
}

/// `constant + Σ coeff·var`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Affine {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: Var) -> Self {
        Self {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(mut self, other: &Affine) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }

    pub fn add_term(&mut self, v: Var, c: f64) {
        if c != 0.0 {
            self.terms.push((v, c));
        }
    }

    pub fn eval(&self, value: &dyn Fn(Var) -> f64) -> f64 {
        self.terms.iter().map(|&(v, c)| c * value(v)).sum::<f64>() + self.constant
    }
}

/// `Tr(A V)` for Hermitian `A` over the real parametrization of `V`.
pub fn hermitian_trace(a: &DMatrix<Complex64>) -> Affine {
    let n = a.nrows();
    let mut e = Affine::default();
    for i in 0..n {
        e.add_term(Var::Re(i, i), a[(i, i)].re);
        for j in i + 1..n {
            e.add_term(Var::Re(i, j), 2.0 * a[(i, j)].re);
            e.add_term(Var::Im(i, j), 2.0 * a[(i, j)].im);
        }
    }
    e
}

/// `[[Re A, −Im A], [Im A, Re A]]`.
pub fn real_embedding(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = a[(i, j)];
            out[(i, j)] = z.re;
            out[(n + i, n + j)] = z.re;
            out[(n + i, j)] = z.im;
            out[(i, n + j)] = -z.im;
        }
    }
    out
}

/// Rebuilds `V` from values of its real parametrization.
pub fn hermitian_from(n: usize, value: &dyn Fn(Var) -> f64) -> DMatrix<Complex64> {
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        v[(i, i)] = Complex64::new(value(Var::Re(i, i)), 0.0);
        for j in i + 1..n {
            let z = Complex64::new(value(Var::Re(i, j)), value(Var::Im(i, j)));
            v[(i, j)] = z;
            v[(j, i)] = z.conj();
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    ActiveBalance,
    ReactiveBalance,
    PoleActive,
    PoleReactive,
    SlackMagnitude,
    VoltageBand,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceBounds {
    /// `Tr(A V) = rhs`, with `rhs` affine in the setpoints.
    Equal(Affine),
    Interval {
        lower: f64,
        upper: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConstraint {
    pub kind: TraceKind,
    pub node: usize,
    pub house: Option<usize>,
    pub matrix: DMatrix<Complex64>,
    pub bounds: TraceBounds,
}

impl TraceConstraint {
    /// Signed residual (equalities) or distance outside the interval.
    pub fn residual(&self, v: &DMatrix<Complex64>, value: &dyn Fn(Var) -> f64) -> f64 {
        let t = (&self.matrix * v).trace().re;
        match &self.bounds {
            TraceBounds::Equal(rhs) => t - rhs.eval(value),
            TraceBounds::Interval { lower, upper } => (lower - t).max(t - upper).max(0.0),
        }
    }
}

/// Which setpoints of a house are decision variables; the others are fixed
/// at `(P̄, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HouseControl {
    pub curtail: bool,
    pub reactive: bool,
}

impl HouseControl {
    pub fn any(&self) -> bool {
        self.curtail || self.reactive
    }
}

pub fn house_controls(
    step: &ScenarioStep,
    inverters: &[InverterSpec],
    spec: &DispatchSpec,
) -> Vec<HouseControl> {
    step.p_avail
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let selected = spec.selection.as_ref().is_none_or(|s| s[k]);
            let curtail = selected && !spec.pin_curtailment && p > 0.0;
            // the PF cut leaves no reactive range without active output
            let pf_closed = spec.enforce_pf && (p <= 0.0 || inverters[k].pf_min >= 1.0);
            let reactive = selected && !spec.pin_reactive && !pf_closed;
            HouseControl { curtail, reactive }
        })
        .collect()
}

fn curtail_expr(ctrl: &[HouseControl], k: usize) -> Affine {
    if ctrl[k].curtail {
        Affine::var(Var::Curtail(k))
    } else {
        Affine::constant(0.0)
    }
}

fn reactive_expr(ctrl: &[HouseControl], k: usize) -> Affine {
    if ctrl[k].reactive {
        Affine::var(Var::Reactive(k))
    } else {
        Affine::constant(0.0)
    }
}

/// Nodal balance, zero-injection, slack-magnitude and voltage-band
/// constraints.
pub fn build_trace_constraints(
    model: &FeederModel,
    mats: &FormulationMatrices,
    step: &ScenarioStep,
    controls: &[HouseControl],
    limits: &VoltageLimits,
) -> Vec<TraceConstraint> {
    let mut out = Vec::new();
    for (k, &node) in model.houses.iter().enumerate() {
        let p_net = step.p_avail[k] - step.p_load[k];
        out.push(TraceConstraint {
            kind: TraceKind::ActiveBalance,
            node,
            house: Some(k),
            matrix: mats.active[node].clone(),
            bounds: TraceBounds::Equal(
                Affine::constant(p_net).add(&curtail_expr(controls, k).scaled(-1.0)),
            ),
        });
        out.push(TraceConstraint {
            kind: TraceKind::ReactiveBalance,
            node,
            house: Some(k),
            matrix: mats.reactive[node].clone(),
            bounds: TraceBounds::Equal(
                Affine::constant(-step.q_load[k]).add(&reactive_expr(controls, k)),
            ),
        });
    }
    for &node in &model.poles {
        for (kind, m) in [
            (TraceKind::PoleActive, &mats.active),
            (TraceKind::PoleReactive, &mats.reactive),
        ] {
            out.push(TraceConstraint {
                kind,
                node,
                house: None,
                matrix: m[node].clone(),
                bounds: TraceBounds::Equal(Affine::constant(0.0)),
            });
        }
    }
    let sel = |node: usize| mats.selector(node).map(|x| Complex64::new(x, 0.0));
    out.push(TraceConstraint {
        kind: TraceKind::SlackMagnitude,
        node: 0,
        house: None,
        matrix: sel(0),
        bounds: TraceBounds::Equal(Affine::constant(limits.v_slack * limits.v_slack)),
    });
    for node in 1..model.num_nodes() {
        out.push(TraceConstraint {
            kind: TraceKind::VoltageBand,
            node,
            house: None,
            matrix: sel(node),
            bounds: TraceBounds::Interval {
                lower: limits.v_min * limits.v_min,
                upper: limits.v_max * limits.v_max,
            },
        });
    }
    out
}

/// Objective split into its reported parts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Objective {
    pub loss: Affine,
    pub curtailment: Affine,
    pub deviation: Affine,
    pub regularizer: Affine,
}

impl Objective {
    pub fn total(&self) -> Affine {
        self.loss
            .clone()
            .add(&self.curtailment)
            .add(&self.deviation)
            .add(&self.regularizer)
    }
}

pub fn build_objective(
    model: &FeederModel,
    mats: &FormulationMatrices,
    controls: &[HouseControl],
    spec: &DispatchSpec,
) -> Objective {
    let loss = mats.loss.map(|x| Complex64::new(x, 0.0));
    let mut obj = Objective {
        loss: hermitian_trace(&loss).scaled(spec.c_rho),
        ..Default::default()
    };
    if spec.c_nu > 0.0 {
        obj.deviation.add_term(Var::Deviation, spec.c_nu);
    }
    for (k, c) in controls.iter().enumerate().take(model.num_houses()) {
        if c.curtail && spec.c_phi > 0.0 {
            obj.curtailment.add_term(Var::CostEpigraph(k), spec.c_phi);
        }
        let lam = spec.lambda.get(k);
        if c.any() && lam > 0.0 {
            obj.regularizer.add_term(Var::GroupEpigraph(k), lam);
        }
        if c.curtail {
            obj.regularizer.add_term(Var::Curtail(k), spec.lambda_p);
        }
        if c.reactive && spec.lambda_q > 0.0 {
            obj.regularizer
                .add_term(Var::ReactivePlus(k), spec.lambda_q);
            obj.regularizer
                .add_term(Var::ReactiveMinus(k), spec.lambda_q);
        }
    }
    obj
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmiKind {
    VoltageOuterProduct,
    VoltageDeviation,
    CurtailmentCost,
    GroupNorm,
    ApparentPower,
    PowerFactor,
}

/// Symmetric matrix, affine in the variables, required PSD. Only the upper
/// triangle is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub kind: LmiKind,
    pub house: Option<usize>,
    pub dim: usize,
    pub entries: Vec<(usize, usize, Affine)>,
}

impl LmiBlock {
    fn new(kind: LmiKind, house: Option<usize>, dim: usize) -> Self {
        Self {
            kind,
            house,
            dim,
            entries: Vec::new(),
        }
    }

    fn set(&mut self, i: usize, j: usize, e: Affine) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((i, j, e));
    }

    pub fn eval(&self, value: &dyn Fn(Var) -> f64) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, e) in &self.entries {
            let x = e.eval(value);
            m[(*i, *j)] += x;
            if i != j {
                m[(*j, *i)] += x;
            }
        }
        m
    }
}

/// Real embedding of `V ⪰ 0`.
pub fn voltage_block(n: usize) -> LmiBlock {
    let mut b = LmiBlock::new(LmiKind::VoltageOuterProduct, None, 2 * n);
    for i in 0..n {
        b.set(i, i, Affine::var(Var::Re(i, i)));
        b.set(n + i, n + i, Affine::var(Var::Re(i, i)));
        for j in i + 1..n {
            b.set(i, j, Affine::var(Var::Re(i, j)));
            b.set(n + i, n + j, Affine::var(Var::Re(i, j)));
            b.set(j, n + i, Affine::var(Var::Im(i, j)));
            b.set(i, n + j, Affine::var(Var::Im(i, j)).scaled(-1.0));
        }
    }
    b
}

/// Epigraph, norm, rating and deviation blocks.
pub fn build_lmi_blocks(
    model: &FeederModel,
    mats: &FormulationMatrices,
    step: &ScenarioStep,
    inverters: &[InverterSpec],
    controls: &[HouseControl],
    spec: &DispatchSpec,
) -> Result<Vec<LmiBlock>> {
    let mut blocks = Vec::new();
    let n = model.num_nodes();
    if spec.c_nu > 0.0 {
        // [[υI, Π d], [dᵀΠ, υ]] with d = diag(V)
        let mut b = LmiBlock::new(LmiKind::VoltageDeviation, None, n + 1);
        for i in 0..=n {
            b.set(i, i, Affine::var(Var::Deviation));
        }
        for i in 0..n {
            let mut e = Affine::default();
            for j in 0..n {
                e.add_term(Var::Re(j, j), mats.projector[(i, j)]);
            }
            b.set(i, n, e);
        }
        blocks.push(b);
    }
    for (k, ctrl) in controls.iter().enumerate() {
        if !ctrl.any() {
            continue;
        }
        let a = spec.curtail_a.get(k);
        if a < 0.0 {
            return Err(OidError::Spec(format!(
                "curtail_a for house {k} is negative"
            )));
        }
        let p = curtail_expr(controls, k);
        let q = reactive_expr(controls, k);
        if ctrl.curtail && spec.c_phi > 0.0 {
            // y ≥ a P² + b P  ⟺  [[y − bP, −√a P], [−√a P, 1]] ⪰ 0
            let mut b = LmiBlock::new(LmiKind::CurtailmentCost, Some(k), 2);
            b.set(
                0,
                0,
                Affine::var(Var::CostEpigraph(k)).add(&p.clone().scaled(-spec.curtail_b.get(k))),
            );
            b.set(0, 1, p.clone().scaled(-a.sqrt()));
            b.set(1, 1, Affine::constant(1.0));
            blocks.push(b);
        }
        if spec.lambda.get(k) > 0.0 {
            // w ≥ ‖(P, Q)‖
            let mut b = LmiBlock::new(LmiKind::GroupNorm, Some(k), 3);
            for i in 0..3 {
                b.set(i, i, Affine::var(Var::GroupEpigraph(k)));
            }
            b.set(0, 2, p.clone());
            b.set(1, 2, q.clone());
            blocks.push(b);
        }
        // Q² + (P̄ − P)² ≤ S²
        let s = inverters[k].s_rating;
        let produced = Affine::constant(step.p_avail[k]).add(&p.clone().scaled(-1.0));
        let mut b = LmiBlock::new(LmiKind::ApparentPower, Some(k), 3);
        b.set(0, 0, Affine::constant(s * s));
        b.set(0, 1, q.clone().scaled(-1.0));
        b.set(0, 2, produced.clone().scaled(-1.0));
        b.set(1, 1, Affine::constant(1.0));
        b.set(2, 2, Affine::constant(1.0));
        blocks.push(b);
        if spec.enforce_pf && ctrl.reactive && spec.pf_encoding == PfEncoding::Cone {
            let t = produced.scaled(inverters[k].tan_theta());
            let mut b = LmiBlock::new(LmiKind::PowerFactor, Some(k), 2);
            b.set(0, 0, t.clone());
            b.set(1, 1, t);
            b.set(0, 1, q);
            blocks.push(b);
        }
    }
    Ok(blocks)
}

/// Position of every decision variable in the solver vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VarLayout {
    index: BTreeMap<Var, usize>,
    vars: Vec<Var>,
}

impl VarLayout {
    fn push(&mut self, v: Var) {
        if !self.index.contains_key(&v) {
            self.index.insert(v, self.vars.len());
            self.vars.push(v);
        }
    }

    pub fn get(&self, v: Var) -> Option<usize> {
        self.index.get(&v).copied()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Value of `v` in `x`; variables absent from the program read as 0.
    pub fn value(&self, x: &[f64], v: Var) -> f64 {
        self.get(v).map_or(0.0, |i| x[i])
    }

    fn lin(&self, e: &Affine) -> LinExpr {
        let mut out = LinExpr::new();
        for &(v, c) in &e.terms {
            out.add_term(self.index[&v], c);
        }
        out.constant = e.constant;
        out
    }
}

/// Index of each named constraint family in the assembled program.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowMap {
    /// Equality rows, by house.
    pub active_balance: Vec<usize>,
    pub reactive_balance: Vec<usize>,
    /// Inequality rows `P_c ≥ 0` and `P̄ − P_c ≥ 0`, by house.
    pub curtail_lower: Vec<Option<usize>>,
    pub curtail_upper: Vec<Option<usize>>,
    /// Inequality rows `Vₙ² ≥ V_min²` and `V_max² ≥ Vₙ²`, by node.
    pub band_lower: Vec<Option<usize>>,
    pub band_upper: Vec<Option<usize>>,
    /// LMI indices, by house.
    pub apparent_power: Vec<Option<usize>>,
    pub group_norm: Vec<Option<usize>>,
    pub curtailment_cost: Vec<Option<usize>>,
    pub deviation: Option<usize>,
    pub voltage: usize,
}

/// Assembled relaxed program with the bookkeeping needed to read results.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub problem: Problem,
    pub layout: VarLayout,
    pub rows: RowMap,
    pub controls: Vec<HouseControl>,
    pub objective: Objective,
    pub trace: Vec<TraceConstraint>,
    pub blocks: Vec<LmiBlock>,
    pub limits: VoltageLimits,
    pub num_nodes: usize,
}

impl ConicProblem {
    pub fn value(&self, x: &[f64], v: Var) -> f64 {
        self.layout.value(x, v)
    }

    pub fn voltage_matrix(&self, x: &[f64]) -> DMatrix<Complex64> {
        hermitian_from(self.num_nodes, &|v| self.value(x, v))
    }
}

/// Builds the complete relaxed program for one step.
pub fn assemble(
    model: &FeederModel,
    scenario: &Scenario,
    step: &ScenarioStep,
    spec: &DispatchSpec,
) -> Result<ConicProblem> {
    let h = model.num_houses();
    spec.validate(h)?;
    if step.p_avail.len() != h || scenario.inverters.len() != h {
        return Err(OidError::Scenario(format!(
            "step and ratings must cover {h} houses"
        )));
    }
    let limits = spec.limits_for(scenario);
    let n = model.num_nodes();
    let mats = FormulationMatrices::new(model);
    let controls = house_controls(step, &scenario.inverters, spec);
    let trace = build_trace_constraints(model, &mats, step, &controls, &limits);
    let objective = build_objective(model, &mats, &controls, spec);
    let mut blocks = vec![voltage_block(n)];
    blocks.extend(build_lmi_blocks(
        model,
        &mats,
        step,
        &scenario.inverters,
        &controls,
        spec,
    )?);

    let mut layout = VarLayout::default();
    for i in 0..n {
        for j in i..n {
            layout.push(Var::Re(i, j));
            if i < j {
                layout.push(Var::Im(i, j));
            }
        }
    }
    for (k, c) in controls.iter().enumerate() {
        if c.curtail {
            layout.push(Var::Curtail(k));
        }
        if c.reactive {
            layout.push(Var::Reactive(k));
            if spec.lambda_q > 0.0 {
                layout.push(Var::ReactivePlus(k));
                layout.push(Var::ReactiveMinus(k));
            }
        }
        if c.curtail && spec.c_phi > 0.0 {
            layout.push(Var::CostEpigraph(k));
        }
        if c.any() && spec.lambda.get(k) > 0.0 {
            layout.push(Var::GroupEpigraph(k));
        }
    }
    if spec.c_nu > 0.0 {
        layout.push(Var::Deviation);
    }

    let mut problem = Problem::new(layout.len());
    for &(v, c) in &objective.total().terms {
        problem.cost[layout.index[&v]] += c;
    }
    let mut rows = RowMap {
        active_balance: vec![0; h],
        reactive_balance: vec![0; h],
        curtail_lower: vec![None; h],
        curtail_upper: vec![None; h],
        band_lower: vec![None; n],
        band_upper: vec![None; n],
        apparent_power: vec![None; h],
        group_norm: vec![None; h],
        curtailment_cost: vec![None; h],
        ..Default::default()
    };

    for tc in &trace {
        let lhs = hermitian_trace(&tc.matrix);
        match &tc.bounds {
            TraceBounds::Equal(rhs) => {
                let idx = problem.equalities.len();
                problem.add_eq(layout.lin(&lhs.add(&rhs.clone().scaled(-1.0))));
                match (tc.kind, tc.house) {
                    (TraceKind::ActiveBalance, Some(k)) => rows.active_balance[k] = idx,
                    (TraceKind::ReactiveBalance, Some(k)) => rows.reactive_balance[k] = idx,
                    _ => {}
                }
            }
            TraceBounds::Interval { lower, upper } => {
                rows.band_lower[tc.node] = Some(problem.inequalities.len());
                problem.add_ineq(layout.lin(&lhs.clone().add(&Affine::constant(-lower))));
                rows.band_upper[tc.node] = Some(problem.inequalities.len());
                problem.add_ineq(layout.lin(&lhs.scaled(-1.0).add(&Affine::constant(*upper))));
            }
        }
    }

    for (k, c) in controls.iter().enumerate() {
        if c.curtail {
            rows.curtail_lower[k] = Some(problem.inequalities.len());
            problem.add_ineq(layout.lin(&Affine::var(Var::Curtail(k))));
            rows.curtail_upper[k] = Some(problem.inequalities.len());
            problem.add_ineq(layout.lin(
                &Affine::constant(step.p_avail[k]).add(&Affine::var(Var::Curtail(k)).scaled(-1.0)),
            ));
        }
        if c.reactive && spec.lambda_q > 0.0 {
            let mut split = Affine::var(Var::Reactive(k));
            split.add_term(Var::ReactivePlus(k), -1.0);
            split.add_term(Var::ReactiveMinus(k), 1.0);
            problem.add_eq(layout.lin(&split));
            problem.add_ineq(layout.lin(&Affine::var(Var::ReactivePlus(k))));
            problem.add_ineq(layout.lin(&Affine::var(Var::ReactiveMinus(k))));
        }
        if c.reactive && spec.enforce_pf && spec.pf_encoding == PfEncoding::TwoInequalities {
            let t = Affine::constant(step.p_avail[k])
                .add(&curtail_expr(&controls, k).scaled(-1.0))
                .scaled(scenario.inverters[k].tan_theta());
            problem
                .add_ineq(layout.lin(&t.clone().add(&Affine::var(Var::Reactive(k)).scaled(-1.0))));
            problem.add_ineq(layout.lin(&t.add(&Affine::var(Var::Reactive(k)))));
        }
    }

    for b in &blocks {
        let idx = problem.lmis.len();
        let mut lmi = Lmi::new(b.dim);
        for (i, j, e) in &b.entries {
            lmi.add_expr_entry(*i, *j, &layout.lin(e));
        }
        problem.add_lmi(lmi);
        match (b.kind, b.house) {
            (LmiKind::VoltageOuterProduct, _) => rows.voltage = idx,
            (LmiKind::VoltageDeviation, _) => rows.deviation = Some(idx),
            (LmiKind::ApparentPower, Some(k)) => rows.apparent_power[k] = Some(idx),
            (LmiKind::GroupNorm, Some(k)) => rows.group_norm[k] = Some(idx),
            (LmiKind::CurtailmentCost, Some(k)) => rows.curtailment_cost[k] = Some(idx),
            _ => {}
        }
    }

    Ok(ConicProblem {
        problem,
        layout,
        rows,
        controls,
        objective,
        trace,
        blocks,
        limits,
        num_nodes: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{
        build_admittance, twelve_house_config, EdgeConfig, FeederConfig, LineParams, NodeConfig,
        NodeRole, PerUnitBase,
    };
    use crate::oracle::{house_injections, newton_power_flow};
    use crate::scenario::twelve_house_ratings;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Slack 0, pole 1, houses 2 and 3.
    fn small_model() -> FeederModel {
        let node = |id, role| NodeConfig {
            id,
            role,
            name: None,
        };
        build_admittance(&FeederConfig {
            base: PerUnitBase::default(),
            nodes: vec![
                node(0, NodeRole::Slack),
                node(1, NodeRole::Pole),
                node(2, NodeRole::House),
                node(3, NodeRole::House),
            ],
            edges: vec![
                EdgeConfig {
                    from: 0,
                    to: 1,
                    line: LineParams::pole_pole(80.0),
                },
                EdgeConfig {
                    from: 1,
                    to: 2,
                    line: LineParams::drop(30.0),
                },
                EdgeConfig {
                    from: 1,
                    to: 3,
                    line: LineParams::drop(25.0),
                },
            ],
        })
        .unwrap()
    }

    fn random_tree(parents: &[usize], house: &[bool], lengths: &[f64]) -> FeederModel {
        let mut nodes = vec![NodeConfig {
            id: 0,
            role: NodeRole::Slack,
            name: None,
        }];
        let mut edges = Vec::new();
        for (i, &p) in parents.iter().enumerate() {
            let id = i + 1;
            let role = if house[i] {
                NodeRole::House
            } else {
                NodeRole::Pole
            };
            nodes.push(NodeConfig {
                id,
                role,
                name: None,
            });
            let line = if house[i] {
                LineParams::drop(lengths[i])
            } else {
                LineParams::pole_pole(lengths[i])
            };
            edges.push(EdgeConfig {
                from: p % id,
                to: id,
                line,
            });
        }
        build_admittance(&FeederConfig {
            base: PerUnitBase::default(),
            nodes,
            edges,
        })
        .unwrap()
    }

    fn outer(v: &[Complex64]) -> DMatrix<Complex64> {
        let v = DVector::from_column_slice(v);
        &v * v.adjoint()
    }

    fn value_of<'a>(
        v: &'a DMatrix<Complex64>,
        other: &'a dyn Fn(Var) -> f64,
    ) -> impl Fn(Var) -> f64 + 'a {
        move |var| match var {
            Var::Re(i, j) => v[(i, j)].re,
            Var::Im(i, j) => v[(i, j)].im,
            _ => other(var),
        }
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    fn twelve_house_scenario(p: f64) -> (FeederModel, Scenario) {
        let model = build_admittance(&twelve_house_config()).unwrap();
        let ratings = twelve_house_ratings(&model);
        let step = ScenarioStep {
            time: "12:00".into(),
            p_avail: vec![p; 12],
            p_load: vec![0.1; 12],
            q_load: vec![0.05; 12],
        };
        let scenario = Scenario {
            steps: vec![step],
            step_hours: 1.0,
            inverters: ratings.to_specs(&model).unwrap(),
            limits: VoltageLimits::default(),
        };
        (model, scenario)
    }

    #[test]
    fn projector_is_idempotent_and_kills_constants() {
        let mats = FormulationMatrices::new(&build_admittance(&twelve_house_config()).unwrap());
        let p = &mats.projector;
        assert_eq!(p, &p.transpose());
        assert!((p * p - p).amax() < 1e-15);
        assert!((p * DVector::from_element(19, 1.0)).amax() < 1e-15);
    }

    #[test]
    fn helper_matrices_are_hermitian() {
        let mats = FormulationMatrices::new(&small_model());
        for m in mats.active.iter().chain(&mats.reactive) {
            assert_eq!(m, &m.adjoint());
        }
        let s = mats.selector(2);
        assert_eq!(s.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(s[(2, 2)], 1.0);
    }

    #[test]
    fn band_bounds_are_squared_limits() {
        let model = small_model();
        let mats = FormulationMatrices::new(&model);
        let step = ScenarioStep {
            time: "t".into(),
            p_avail: vec![0.0; 2],
            p_load: vec![0.0; 2],
            q_load: vec![0.0; 2],
        };
        let ctrl = vec![
            HouseControl {
                curtail: false,
                reactive: false
            };
            2
        ];
        let tc = build_trace_constraints(&model, &mats, &step, &ctrl, &VoltageLimits::default());
        let bands: Vec<_> = tc
            .iter()
            .filter(|c| c.kind == TraceKind::VoltageBand)
            .collect();
        assert_eq!(bands.len(), 3);
        for c in bands {
            let TraceBounds::Interval { lower, upper } = c.bounds else {
                panic!("band must be an interval")
            };
            assert!((lower - 0.840889).abs() < 1e-12 && (upper - 1.085764).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_constraints_hold_at_power_flow_solution() {
        let (model, scenario) = twelve_house_scenario(0.4);
        let step = &scenario.steps[0];
        let mats = FormulationMatrices::new(&model);
        let ctrl = vec![
            HouseControl {
                curtail: true,
                reactive: true
            };
            12
        ];
        let set: Vec<(f64, f64)> = step.p_avail.iter().map(|&p| (p, 0.0)).collect();
        let pf = newton_power_flow(&model, &house_injections(&model, step, &set), 1.02).unwrap();
        let v = outer(&pf.v);
        let zero = |_: Var| 0.0;
        let val = value_of(&v, &zero);
        for c in build_trace_constraints(&model, &mats, step, &ctrl, &scenario.limits) {
            if matches!(c.bounds, TraceBounds::Equal(_)) {
                assert!(
                    c.residual(&v, &val).abs() <= 1e-9,
                    "{:?} at node {}",
                    c.kind,
                    c.node
                );
            }
        }
    }

    #[test]
    fn objective_with_loss_weight_only() {
        let model = small_model();
        let mats = FormulationMatrices::new(&model);
        let ctrl = vec![
            HouseControl {
                curtail: true,
                reactive: true
            };
            2
        ];
        let obj = build_objective(&model, &mats, &ctrl, &DispatchSpec::default());
        assert!(
            obj.curtailment.terms.is_empty()
                && obj.deviation.terms.is_empty()
                && obj.regularizer.terms.is_empty()
        );
        assert_eq!(
            obj.loss,
            hermitian_trace(&mats.loss.map(|x| Complex64::new(x, 0.0)))
        );
    }

    fn one_house_blocks(spec: &DispatchSpec) -> Vec<LmiBlock> {
        let model = small_model();
        let mats = FormulationMatrices::new(&model);
        let step = ScenarioStep {
            time: "t".into(),
            p_avail: vec![0.3, 0.2],
            p_load: vec![0.0; 2],
            q_load: vec![0.0; 2],
        };
        let inv = vec![
            InverterSpec {
                node: 2,
                s_rating: 0.5,
                pf_min: 0.85,
            },
            InverterSpec {
                node: 3,
                s_rating: 0.4,
                pf_min: 0.9,
            },
        ];
        let ctrl = house_controls(&step, &inv, spec);
        build_lmi_blocks(&model, &mats, &step, &inv, &ctrl, spec).unwrap()
    }

    fn block(blocks: &[LmiBlock], kind: LmiKind) -> &LmiBlock {
        blocks
            .iter()
            .find(|b| b.kind == kind && b.house.is_none_or(|h| h == 0))
            .unwrap()
    }

    fn full_spec() -> DispatchSpec {
        DispatchSpec {
            c_phi: 1.0,
            c_nu: 1.0,
            curtail_a: PerHouse::Uniform(0.7),
            curtail_b: PerHouse::Uniform(0.4),
            lambda: PerHouse::Uniform(1.0),
            enforce_pf: true,
            pf_encoding: PfEncoding::Cone,
            ..Default::default()
        }
    }

    #[test]
    fn schur_blocks_match_scalar_inequalities() {
        let spec = full_spec();
        let blocks = one_house_blocks(&spec);
        let (p_avail, s, tan) = (0.3, 0.5, 0.85f64.acos().tan());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = [0usize; 5];
        for _ in 0..1000 {
            let pc: f64 = rng.random_range(-0.2..0.6);
            let q: f64 = rng.random_range(-0.6..0.6);
            let y: f64 = rng.random_range(-0.3..0.6);
            let w: f64 = rng.random_range(0.0..0.8);
            let dev: f64 = rng.random_range(0.0..0.3);
            let d: Vec<f64> = (0..4).map(|_| rng.random_range(0.8..1.2)).collect();
            let val = |v: Var| match v {
                Var::Curtail(0) => pc,
                Var::Reactive(0) => q,
                Var::CostEpigraph(0) => y,
                Var::GroupEpigraph(0) => w,
                Var::Deviation => dev,
                Var::Re(i, j) if i == j => d[i],
                _ => 0.0,
            };
            let dn = DVector::from_vec(d.clone());
            let proj = (DMatrix::identity(4, 4) - DMatrix::from_element(4, 4, 0.25)) * &dn;
            let cases = [
                (LmiKind::CurtailmentCost, y - (0.7 * pc * pc + 0.4 * pc)),
                (LmiKind::GroupNorm, w - pc.hypot(q)),
                (
                    LmiKind::ApparentPower,
                    s * s - q * q - (p_avail - pc).powi(2),
                ),
                (LmiKind::PowerFactor, tan * (p_avail - pc) - q.abs()),
                (LmiKind::VoltageDeviation, dev - proj.norm()),
            ];
            for (i, (kind, margin)) in cases.into_iter().enumerate() {
                if margin.abs() < 1e-6 {
                    continue;
                }
                let psd = min_eig(&block(&blocks, kind).eval(&val)) >= -1e-12;
                assert_eq!(psd, margin > 0.0, "{kind:?}: margin {margin}");
                checked[i] += 1;
            }
        }
        assert!(checked.iter().all(|&c| c > 900));
    }

    #[test]
    fn block_examples() {
        let mut spec = full_spec();
        spec.curtail_a = PerHouse::Uniform(0.0);
        let blocks = one_house_blocks(&spec);
        let at = |pc: f64, q: f64, y: f64, w: f64| {
            move |v: Var| match v {
                Var::Curtail(0) => pc,
                Var::Reactive(0) => q,
                Var::CostEpigraph(0) => y,
                Var::GroupEpigraph(0) => w,
                _ => 0.0,
            }
        };
        // a = 0: the cost block is diag(y − bP, 1)
        let m = block(&blocks, LmiKind::CurtailmentCost).eval(&at(0.25, 0.0, 0.3, 0.0));
        assert_eq!(
            m,
            DMatrix::from_row_slice(2, 2, &[0.3 - 0.4 * 0.25, 0.0, 0.0, 1.0])
        );
        let g = block(&blocks, LmiKind::GroupNorm);
        assert!(min_eig(&g.eval(&at(0.1, 0.2, 0.0, 0.3))) > 0.0);
        assert!(min_eig(&g.eval(&at(0.1, 0.2, 0.0, 0.2))) < 0.0);
        // (P̄ − P_c)² + Q² = S² with P̄ = 0.3, S = 0.5
        let m = block(&blocks, LmiKind::ApparentPower).eval(&at(0.0, 0.4, 0.0, 0.0));
        assert!(min_eig(&m).abs() < 1e-12);
    }

    #[test]
    fn negative_quadratic_coefficient_rejected() {
        let model = small_model();
        let mats = FormulationMatrices::new(&model);
        let step = ScenarioStep {
            time: "t".into(),
            p_avail: vec![0.3, 0.2],
            p_load: vec![0.0; 2],
            q_load: vec![0.0; 2],
        };
        let inv = vec![
            InverterSpec {
                node: 2,
                s_rating: 0.5,
                pf_min: 0.85
            };
            2
        ];
        let spec = DispatchSpec {
            c_phi: 1.0,
            curtail_a: PerHouse::Uniform(-1.0),
            ..Default::default()
        };
        let ctrl = house_controls(&step, &inv, &spec);
        assert!(build_lmi_blocks(&model, &mats, &step, &inv, &ctrl, &spec).is_err());
    }

    #[test]
    fn twelve_house_block_inventory() {
        let (model, scenario) = twelve_house_scenario(0.4);
        let spec = DispatchSpec {
            c_phi: 1.0,
            c_nu: 1.0,
            curtail_b: PerHouse::Uniform(1.0),
            lambda: PerHouse::Uniform(0.5),
            ..Default::default()
        };
        let cp = assemble(&model, &scenario, &scenario.steps[0], &spec).unwrap();
        let count = |k: LmiKind| cp.blocks.iter().filter(|b| b.kind == k).count();
        let dims = |k: LmiKind| cp.blocks.iter().find(|b| b.kind == k).unwrap().dim;
        assert_eq!(dims(LmiKind::VoltageOuterProduct), 38);
        assert_eq!(dims(LmiKind::VoltageDeviation), 20);
        assert_eq!(dims(LmiKind::CurtailmentCost), 2);
        assert_eq!(dims(LmiKind::GroupNorm), 3);
        assert_eq!(dims(LmiKind::ApparentPower), 3);
        for k in [
            LmiKind::CurtailmentCost,
            LmiKind::GroupNorm,
            LmiKind::ApparentPower,
        ] {
            assert_eq!(count(k), 12);
        }
        // weights at zero drop their blocks
        let cp = assemble(
            &model,
            &scenario,
            &scenario.steps[0],
            &DispatchSpec::default(),
        )
        .unwrap();
        assert_eq!(cp.blocks.len(), 13);
    }

    #[test]
    fn pins_remove_variables() {
        let (model, scenario) = twelve_house_scenario(0.4);
        let apc = DispatchSpec {
            pin_reactive: true,
            ..Default::default()
        };
        let cp = assemble(&model, &scenario, &scenario.steps[0], &apc).unwrap();
        assert!((0..12).all(|k| cp.layout.get(Var::Reactive(k)).is_none()
            && cp.layout.get(Var::Curtail(k)).is_some()));
        let rpc = DispatchSpec {
            pin_curtailment: true,
            ..Default::default()
        };
        let cp = assemble(&model, &scenario, &scenario.steps[0], &rpc).unwrap();
        assert!((0..12).all(|k| cp.layout.get(Var::Curtail(k)).is_none()
            && cp.layout.get(Var::Reactive(k)).is_some()));
    }

    proptest! {
        #[test]
        fn trace_identities_on_random_radial_networks(
            parents in proptest::collection::vec(0usize..64, 1..8),
            house_bits in proptest::collection::vec(any::<bool>(), 8),
            lengths in proptest::collection::vec(5.0f64..200.0, 8),
            seed in 0u64..1000,
        ) {
            let model = random_tree(&parents, &house_bits, &lengths);
            let mats = FormulationMatrices::new(&model);
            let n = model.num_nodes();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<Complex64> = (0..n)
                .map(|_| Complex64::from_polar(rng.random_range(0.9..1.1), rng.random_range(-0.1..0.1)))
                .collect();
            let i = &model.admittance * DVector::from_column_slice(&v);
            let vv = outer(&v);
            for node in 0..n {
                let s = v[node] * i[node].conj();
                prop_assert!(((&mats.active[node] * &vv).trace().re - s.re).abs() < 1e-9);
                prop_assert!(((&mats.reactive[node] * &vv).trace().re - s.im).abs() < 1e-9);
                // the affine form over the real parametrization agrees
                let lhs = hermitian_trace(&mats.active[node]).eval(&|var| match var {
                    Var::Re(a, b) => vv[(a, b)].re,
                    Var::Im(a, b) => vv[(a, b)].im,
                    _ => 0.0,
                });
                prop_assert!((lhs - s.re).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_trace_is_nonnegative_on_psd(seed in 0u64..1000, rank in 1usize..4) {
            let model = small_model();
            let mats = FormulationMatrices::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(4, rank, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let v = &b * b.adjoint();
            let l = mats.loss.map(|x| Complex64::new(x, 0.0));
            prop_assert!((&l * &v).trace().re >= -1e-12);
        }

        #[test]
        fn embedding_doubles_eigenvalues(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(4, 4, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let h = (&a + a.adjoint()) * Complex64::new(0.5, 0.0);
            let mut complex: Vec<f64> = h.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            complex.sort_by(f64::total_cmp);
            let mut real: Vec<f64> = real_embedding(&h).symmetric_eigen().eigenvalues.iter().copied().collect();
            real.sort_by(f64::total_cmp);
            for (k, e) in complex.iter().enumerate() {
                prop_assert!((real[2 * k] - e).abs() < 1e-10 && (real[2 * k + 1] - e).abs() < 1e-10);
            }
        }
    }
}
