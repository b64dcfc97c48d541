//! JSON dump of dispatch results. Wall-clock timings are left out so that
//! repeated runs produce identical files.

use oid_core::feeder::FeederModel;
use oid_core::recovery::{DispatchSolution, ObjectiveBreakdown};
use oid_core::strategies::SELECTION_EPS;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct HouseRecord {
    pub name: String,
    pub p_avail_kw: f64,
    pub p_c_kw: f64,
    pub q_s_kvar: f64,
    pub controlled: bool,
}

#[derive(Debug, Serialize)]
pub struct NodeRecord {
    pub name: String,
    pub magnitude: f64,
    /// Degrees; absent when the relaxation is not tight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct StepRecord {
    pub time: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveBreakdown>,
    pub houses: Vec<HouseRecord>,
    pub nodes: Vec<NodeRecord>,
}

impl StepRecord {
    pub fn solved(time: &str, sol: &DispatchSolution, model: &FeederModel) -> Self {
        let base = model.base;
        let houses = model
            .house_names()
            .into_iter()
            .enumerate()
            .map(|(k, name)| HouseRecord {
                name,
                p_avail_kw: base.pu_to_kw(sol.p_avail[k]),
                p_c_kw: base.pu_to_kw(sol.p_c[k]),
                q_s_kvar: base.pu_to_kw(sol.q_s[k]),
                controlled: sol.p_c[k].hypot(sol.q_s[k]) > SELECTION_EPS,
            })
            .collect();
        let mags = sol.magnitudes();
        let nodes = model
            .names
            .iter()
            .enumerate()
            .map(|(n, name)| NodeRecord {
                name: name.clone(),
                magnitude: mags[n],
                angle_deg: sol.phasors.as_ref().map(|p| p.v[n].arg().to_degrees()),
            })
            .collect();
        Self {
            time: time.to_string(),
            status: if sol.is_tight() { "tight" } else { "not_tight" },
            error: None,
            rank_ratio: Some(sol.rank_ratio),
            iterations: Some(sol.diagnostics.iterations),
            objective: Some(sol.objective),
            houses,
            nodes,
        }
    }

    pub fn failed(time: &str, error: String) -> Self {
        Self {
            time: time.to_string(),
            status: "failed",
            error: Some(error),
            rank_ratio: None,
            iterations: None,
            objective: None,
            houses: Vec::new(),
            nodes: Vec::new(),
        }
    }
}
