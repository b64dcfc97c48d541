//! Named dispatch strategies, inverter-count selection and weight tuning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};
use crate::feeder::FeederModel;
use crate::formulation::{DispatchSpec, PerHouse};
use crate::recovery::{solve_dispatch, DispatchSettings, DispatchSolution};
use crate::scenario::{OperatingRegion, Scenario, ScenarioStep};

/// Default threshold on `‖(P_c, Q_s)‖₂` for counting an inverter as
/// controlled, pu.
pub const SELECTION_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Oid,
    Rpc,
    Apc,
    Mixed,
}

impl StrategyKind {
    pub fn region(&self, enforce_pf: bool) -> OperatingRegion {
        match self {
            StrategyKind::Rpc => OperatingRegion::Reactive,
            StrategyKind::Apc => OperatingRegion::Curtail,
            StrategyKind::Oid | StrategyKind::Mixed => OperatingRegion::Joint { enforce_pf },
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = OidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oid" => Ok(Self::Oid),
            "rpc" => Ok(Self::Rpc),
            "apc" => Ok(Self::Apc),
            "mixed" => Ok(Self::Mixed),
            _ => Err(OidError::Spec(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Applies the pins and weight restrictions of `kind` to `base`.
///
/// OID keeps the group weight and drops the entrywise ones; APC pins
/// `Q_s = 0` and keeps only `λ_p`; RPC pins `P_c = 0`, keeps only `λ_q`
/// and turns the power-factor cut off; MIXED keeps every weight.
pub fn strategy_spec(kind: StrategyKind, base: &DispatchSpec) -> Result<DispatchSpec> {
    if base.pin_curtailment || base.pin_reactive {
        return Err(OidError::Spec("base spec must not carry pins".into()));
    }
    let mut s = DispatchSpec {
        strategy: kind,
        ..base.clone()
    };
    match kind {
        StrategyKind::Oid => {
            s.lambda_p = 0.0;
            s.lambda_q = 0.0;
        }
        StrategyKind::Apc => {
            if base.lambda_q > 0.0 {
                return Err(OidError::Spec(
                    "APC pins Q_s = 0, so lambda_q must be 0".into(),
                ));
            }
            s.lambda = PerHouse::Uniform(0.0);
            s.pin_reactive = true;
        }
        StrategyKind::Rpc => {
            if base.lambda_p > 0.0 {
                return Err(OidError::Spec(
                    "RPC pins P_c = 0, so lambda_p must be 0".into(),
                ));
            }
            s.lambda = PerHouse::Uniform(0.0);
            s.pin_curtailment = true;
            s.enforce_pf = false;
        }
        StrategyKind::Mixed => {}
    }
    Ok(s)
}

/// Houses whose `‖(P_c, Q_s)‖₂` exceeds `eps`.
pub fn count_selected(p_c: &[f64], q_s: &[f64], eps: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = p_c
        .iter()
        .zip(q_s)
        .map(|(p, q)| p.hypot(*q) > eps)
        .collect();
    let n = mask.iter().filter(|&&m| m).count();
    (mask, n)
}

/// Which regularization weight a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepWeight {
    #[default]
    Group,
    Active,
    Reactive,
}

impl std::str::FromStr for SweepWeight {
    type Err = OidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" | "group" => Ok(Self::Group),
            "lambda_p" | "active" => Ok(Self::Active),
            "lambda_q" | "reactive" => Ok(Self::Reactive),
            _ => Err(OidError::Spec(format!("unknown sweep weight `{s}`"))),
        }
    }
}

pub fn with_weight(spec: &DispatchSpec, weight: SweepWeight, value: f64) -> DispatchSpec {
    let mut s = spec.clone();
    match weight {
        SweepWeight::Group => s.lambda = PerHouse::Uniform(value),
        SweepWeight::Active => s.lambda_p = value,
        SweepWeight::Reactive => s.lambda_q = value,
    }
    s
}

/// `0` followed by `points` logarithmically spaced values over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    if points == 1 {
        g.push(lo);
    } else {
        let (a, b) = (lo.ln(), hi.ln());
        g.extend((0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()));
    }
    g
}

pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 10.0, 17)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub count: Option<usize>,
    pub selected: Vec<bool>,
    pub objective: Option<f64>,
    pub loss: Option<f64>,
    pub tight: bool,
    pub error: Option<String>,
}

fn point(lambda: f64, res: &Result<DispatchSolution>) -> SweepPoint {
    match res {
        Ok(sol) => {
            let (selected, count) = count_selected(&sol.p_c, &sol.q_s, SELECTION_EPS);
            SweepPoint {
                lambda,
                count: Some(count),
                selected,
                objective: Some(sol.objective.total),
                loss: Some(sol.objective.loss),
                tight: sol.is_tight(),
                error: None,
            }
        }
        Err(e) => SweepPoint {
            lambda,
            count: None,
            selected: Vec::new(),
            objective: None,
            loss: None,
            tight: false,
            error: Some(e.to_string()),
        },
    }
}

/// Solves every grid value concurrently; results are in grid order.
#[allow(clippy::too_many_arguments)]
pub fn sweep_lambda(
    model: &FeederModel,
    scenario: &Scenario,
    step: &ScenarioStep,
    spec: &DispatchSpec,
    weight: SweepWeight,
    grid: &[f64],
    settings: &DispatchSettings,
) -> Vec<(SweepPoint, Result<DispatchSolution>)> {
    grid.par_iter()
        .map(|&lam| {
            let res = solve_dispatch(
                model,
                scenario,
                step,
                &with_weight(spec, weight, lam),
                settings,
            );
            (point(lam, &res), res)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum LambdaSelection {
    /// Smallest weight whose solution controls at most `k` inverters.
    Selected {
        lambda: f64,
        solution: Box<DispatchSolution>,
        sweep: Vec<SweepPoint>,
    },
    /// No weight reached `k`; `floor` is the smallest count among tight
    /// solutions.
    FloorReached {
        floor: usize,
        lambda: f64,
        sweep: Vec<SweepPoint>,
    },
}

impl LambdaSelection {
    pub fn sweep(&self) -> &[SweepPoint] {
        match self {
            LambdaSelection::Selected { sweep, .. }
            | LambdaSelection::FloorReached { sweep, .. } => sweep,
        }
    }
}

/// Scans `grid` (ascending) for the smallest weight whose rank-tight solution
/// selects at most `k` inverters, then narrows the gap to the preceding grid
/// value by `refine` bisection steps. Fails with `NotTight` when no grid
/// point is tight.
#[allow(clippy::too_many_arguments)]
pub fn select_lambda(
    model: &FeederModel,
    scenario: &Scenario,
    step: &ScenarioStep,
    spec: &DispatchSpec,
    weight: SweepWeight,
    k: usize,
    grid: &[f64],
    refine: usize,
    settings: &DispatchSettings,
) -> Result<LambdaSelection> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OidError::Spec(
            "lambda grid must be nonempty and strictly increasing".into(),
        ));
    }
    let results = sweep_lambda(model, scenario, step, spec, weight, grid, settings);
    let mut sweep: Vec<SweepPoint> = results.iter().map(|(p, _)| p.clone()).collect();
    let mut solutions: Vec<Option<DispatchSolution>> = Vec::with_capacity(results.len());
    for (i, (_, res)) in results.into_iter().enumerate() {
        match res {
            Ok(sol) => solutions.push(Some(sol)),
            Err(e) if i == 0 => return Err(e),
            Err(_) => solutions.push(None),
        }
    }
    // counts of non-tight solutions say nothing about physical setpoints
    let ok = |p: &SweepPoint| p.tight && p.count.is_some_and(|c| c <= k);
    let Some(first) = sweep.iter().position(ok) else {
        let Some((idx, floor)) = sweep
            .iter()
            .enumerate()
            .filter(|(_, p)| p.tight)
            .filter_map(|(i, p)| p.count.map(|c| (i, c)))
            .min_by_key(|&(i, c)| (c, i))
        else {
            let ratio = solutions
                .iter()
                .flatten()
                .map(|s| s.rank_ratio)
                .fold(f64::INFINITY, f64::min);
            return Err(OidError::NotTight { ratio });
        };
        return Ok(LambdaSelection::FloorReached {
            floor,
            lambda: grid[idx],
            sweep,
        });
    };
    let mut best = (grid[first], solutions[first].take().expect("point solved"));
    if first > 0 {
        let (mut lo, mut hi) = (grid[first - 1], grid[first]);
        for _ in 0..refine {
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { hi / 2.0 };
            let res = solve_dispatch(
                model,
                scenario,
                step,
                &with_weight(spec, weight, mid),
                settings,
            );
            let p = point(mid, &res);
            let good = ok(&p);
            sweep.push(p);
            match res {
                Ok(sol) if good => {
                    hi = mid;
                    best = (mid, sol);
                }
                _ => lo = mid,
            }
        }
        sweep.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    }
    Ok(LambdaSelection::Selected {
        lambda: best.0,
        solution: Box::new(best.1),
        sweep,
    })
}

/// Per-house weights `λ_h = λ·(1 + f_h)` where `f_h` is the fraction of
/// past steps in which house `h` was selected.
pub fn equitable_weights(history: &[Vec<bool>], lambda: f64) -> Result<Vec<f64>> {
    let Some(first) = history.first() else {
        return Err(OidError::Spec("selection history is empty".into()));
    };
    let h = first.len();
    if history.iter().any(|r| r.len() != h) {
        return Err(OidError::Spec(
            "selection history rows differ in length".into(),
        ));
    }
    let steps = history.len() as f64;
    Ok((0..h)
        .map(|k| {
            let freq = history.iter().filter(|r| r[k]).count() as f64 / steps;
            lambda * (1.0 + freq)
        })
        .collect())
}
