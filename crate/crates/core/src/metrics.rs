//! Evaluation quantities and energy/economic aggregates over a run.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};
use crate::feeder::{FeederModel, PerUnitBase};
use crate::oracle::PowerFlowResult;
use crate::recovery::DispatchSolution;
use crate::strategies::{count_selected, SELECTION_EPS};

/// Placeholder retail price, $/kWh.
pub const DEFAULT_RETAIL_PRICE: f64 = 0.12;

/// Series-branch active power loss `Σ Re{V_m I_mn*} − Re{V_n I_mn*}`, pu.
pub fn losses(v: &[Complex64], model: &FeederModel) -> f64 {
    model
        .edges
        .iter()
        .map(|e| {
            let (vm, vn) = (v[e.from], v[e.to]);
            let current = e.pi.series * (vm - vn);
            (vm * current.conj()).re - (vn * current.conj()).re
        })
        .sum()
}

/// `Σ a_h P_c,h² + b_h P_c,h`.
pub fn curtailment_cost(p_c: &[f64], a: &[f64], b: &[f64]) -> f64 {
    p_c.iter()
        .zip(a)
        .zip(b)
        .map(|((p, a), b)| a * p * p + b * p)
        .sum()
}

/// `‖Π (|V_n|²)_n‖₂`, spread of squared magnitudes about their mean.
pub fn voltage_deviation(v: &[Complex64]) -> f64 {
    squared_deviation(&v.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>())
}

fn squared_deviation(sq: &[f64]) -> f64 {
    if sq.is_empty() {
        return 0.0;
    }
    let mean = sq.iter().sum::<f64>() / sq.len() as f64;
    sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>().sqrt()
}

/// One row of a per-step report. Powers are pu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub time: String,
    pub hours: f64,
    pub tight: bool,
    pub loss: f64,
    pub curtailed: f64,
    pub reactive: f64,
    pub deviation: f64,
    pub selected: usize,
    pub v_max: f64,
    pub v_min: f64,
    pub objective: Option<f64>,
    pub rank_ratio: Option<f64>,
}

impl StepMetrics {
    /// Metrics of a dispatch. Loss and deviation come from the recovered
    /// phasors when tight, otherwise from the relaxed matrix.
    pub fn from_solution(
        time: &str,
        hours: f64,
        sol: &DispatchSolution,
        model: &FeederModel,
    ) -> Self {
        let mags = sol.magnitudes();
        let (loss, deviation) = match &sol.phasors {
            Some(p) => (losses(&p.v, model), voltage_deviation(&p.v)),
            None => {
                let diag: Vec<f64> = (0..sol.voltage_matrix.nrows())
                    .map(|i| sol.voltage_matrix[(i, i)].re)
                    .collect();
                (sol.objective.loss, squared_deviation(&diag))
            }
        };
        let (_, selected) = count_selected(&sol.p_c, &sol.q_s, SELECTION_EPS);
        Self {
            time: time.to_string(),
            hours,
            tight: sol.is_tight(),
            loss,
            curtailed: sol.p_c.iter().sum(),
            reactive: sol.q_s.iter().map(|q| q.abs()).sum(),
            deviation,
            selected,
            v_max: mags.iter().copied().fold(f64::MIN, f64::max),
            v_min: mags.iter().copied().fold(f64::MAX, f64::min),
            objective: Some(sol.objective.total),
            rank_ratio: Some(sol.rank_ratio),
        }
    }

    /// Metrics of an uncontrolled power-flow solution.
    pub fn from_power_flow(
        time: &str,
        hours: f64,
        pf: &PowerFlowResult,
        model: &FeederModel,
    ) -> Self {
        let mags: Vec<f64> = pf.v.iter().map(|z| z.norm()).collect();
        Self {
            time: time.to_string(),
            hours,
            tight: true,
            loss: losses(&pf.v, model),
            curtailed: 0.0,
            reactive: 0.0,
            deviation: voltage_deviation(&pf.v),
            selected: 0,
            v_max: mags.iter().copied().fold(f64::MIN, f64::max),
            v_min: mags.iter().copied().fold(f64::MAX, f64::min),
            objective: None,
            rank_ratio: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub steps: usize,
    pub network_kwh: f64,
    pub curtailed_kwh: f64,
    pub overall_kwh: f64,
    pub retail_price: f64,
    /// Cost of network losses only.
    pub network_cost: f64,
    /// Cost of network losses plus curtailed energy.
    pub overall_cost: f64,
}

/// Integrates loss and curtailment over the run. All rows must share one
/// step duration.
pub fn aggregate(
    rows: &[StepMetrics],
    base: &PerUnitBase,
    retail_price: f64,
) -> Result<EnergySummary> {
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| (r.hours - first.hours).abs() > 1e-12) {
            return Err(OidError::Scenario(
                "mixed step durations in aggregate".into(),
            ));
        }
    }
    let network_kwh: f64 = rows.iter().map(|r| base.pu_to_kw(r.loss) * r.hours).sum();
    let curtailed_kwh: f64 = rows
        .iter()
        .map(|r| base.pu_to_kw(r.curtailed) * r.hours)
        .sum();
    let overall_kwh = network_kwh + curtailed_kwh;
    Ok(EnergySummary {
        steps: rows.len(),
        network_kwh,
        curtailed_kwh,
        overall_kwh,
        retail_price,
        network_cost: retail_price * network_kwh,
        overall_cost: retail_price * overall_kwh,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.9}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.9e}"))
}

/// Per-step CSV. Powers in kW, magnitudes in pu.
pub fn write_steps_csv(rows: &[StepMetrics], base: &PerUnitBase, out: impl Write) -> Result<()> {
    let err = |e: csv::Error| OidError::Scenario(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "time",
        "tight",
        "loss_kw",
        "curtailed_kw",
        "reactive_kvar",
        "deviation",
        "selected",
        "v_max",
        "v_min",
        "objective",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.time.clone(),
            r.tight.to_string(),
            fmt(base.pu_to_kw(r.loss)),
            fmt(base.pu_to_kw(r.curtailed)),
            fmt(base.pu_to_kw(r.reactive)),
            fmt(r.deviation),
            r.selected.to_string(),
            fmt(r.v_max),
            fmt(r.v_min),
            fmt_opt(r.objective),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| OidError::Scenario(e.to_string()))
}

/// Named summary row with the column names `Network`, `Curtailed`, `Overall`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub status: String,
    pub objective: Option<f64>,
    pub reactive_kvarh: f64,
    pub summary: Option<EnergySummary>,
}

pub fn write_summary_csv(rows: &[SummaryRow], out: impl Write) -> Result<()> {
    let err = |e: csv::Error| OidError::Scenario(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "strategy",
        "status",
        "Network",
        "Curtailed",
        "Overall",
        "network_cost",
        "overall_cost",
        "reactive_kvarh",
        "objective",
    ])
    .map_err(err)?;
    for r in rows {
        let cols = match &r.summary {
            Some(s) => vec![
                format!("{:.6}", s.network_kwh),
                format!("{:.6}", s.curtailed_kwh),
                format!("{:.6}", s.overall_kwh),
                format!("{:.6}", s.network_cost),
                format!("{:.6}", s.overall_cost),
            ],
            None => vec![String::new(); 5],
        };
        let mut rec = vec![r.label.clone(), r.status.clone()];
        rec.extend(cols);
        rec.push(format!("{:.6}", r.reactive_kvarh));
        rec.push(fmt_opt(r.objective));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| OidError::Scenario(e.to_string()))
}
