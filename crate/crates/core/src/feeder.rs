//! Radial feeder description, per-unit conversion, bus admittance and
//! ohmic-loss matrices.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};

/// System bases. Impedance base is `v_base² / s_base`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub s_base_va: f64,
    pub v_base_v: f64,
    pub frequency_hz: f64,
}

impl Default for PerUnitBase {
    fn default() -> Self {
        Self {
            s_base_va: 10_000.0,
            v_base_v: 240.0,
            frequency_hz: 60.0,
        }
    }
}

impl PerUnitBase {
    pub fn z_base(&self) -> f64 {
        self.v_base_v * self.v_base_v / self.s_base_va
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_hz
    }

    /// kW (or kvar) to per-unit.
    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw * 1e3 / self.s_base_va
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.s_base_va / 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    Drop,
    PolePole,
}

/// Physical line data in the units the utility tables use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub kind: LineKind,
    pub length_m: f64,
    #[serde(rename = "r_ohm_per_km")]
    pub resistance_ohm_per_km: f64,
    #[serde(rename = "l_mh_per_km")]
    pub inductance_mh_per_km: f64,
    #[serde(rename = "c_uf_per_km")]
    pub capacitance_uf_per_km: f64,
}

impl LineParams {
    pub fn drop(length_m: f64) -> Self {
        Self {
            kind: LineKind::Drop,
            length_m,
            resistance_ohm_per_km: 0.549,
            inductance_mh_per_km: 0.230,
            capacitance_uf_per_km: 0.055,
        }
    }

    pub fn pole_pole(length_m: f64) -> Self {
        Self {
            kind: LineKind::PolePole,
            length_m,
            resistance_ohm_per_km: 0.270,
            inductance_mh_per_km: 0.240,
            capacitance_uf_per_km: 0.072,
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("length", self.length_m),
            ("resistance", self.resistance_ohm_per_km),
            ("inductance", self.inductance_mh_per_km),
            ("capacitance", self.capacitance_uf_per_km),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(OidError::InvalidLine(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.length_m == 0.0 {
            return Err(OidError::InvalidLine("zero length".into()));
        }
        if self.resistance_ohm_per_km == 0.0 && self.inductance_mh_per_km == 0.0 {
            return Err(OidError::InvalidLine("zero series impedance".into()));
        }
        Ok(())
    }
}

/// Series admittance and total shunt admittance of a line, both per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiSection {
    pub series: Complex64,
    pub shunt: Complex64,
}

/// Converts physical line data to a per-unit π-section.
pub fn to_per_unit(line: &LineParams, base: &PerUnitBase) -> Result<PiSection> {
    line.validate()?;
    let km = line.length_m / 1000.0;
    let omega = base.omega();
    let z = Complex64::new(
        line.resistance_ohm_per_km * km,
        omega * line.inductance_mh_per_km * 1e-3 * km,
    );
    let z_pu = z / base.z_base();
    let shunt_siemens = Complex64::new(0.0, omega * line.capacitance_uf_per_km * 1e-6 * km);
    Ok(PiSection {
        series: z_pu.inv(),
        shunt: shunt_siemens * base.z_base(),
    })
}

/// Inverse of [`to_per_unit`] for a known length and kind.
pub fn from_per_unit(
    pi: &PiSection,
    base: &PerUnitBase,
    kind: LineKind,
    length_m: f64,
) -> LineParams {
    let km = length_m / 1000.0;
    let omega = base.omega();
    let z = pi.series.inv() * base.z_base();
    let b = pi.shunt.im / base.z_base();
    LineParams {
        kind,
        length_m,
        resistance_ohm_per_km: z.re / km,
        inductance_mh_per_km: z.im / omega / km * 1e3,
        capacitance_uf_per_km: b / omega / km * 1e6,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Slack,
    House,
    Pole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: usize,
    pub role: NodeRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub from: usize,
    pub to: usize,
    #[serde(flatten)]
    pub line: LineParams,
}

/// On-disk feeder description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederConfig {
    #[serde(default)]
    pub base: PerUnitBase,
    pub nodes: Vec<NodeConfig>,
    pub edges: Vec<EdgeConfig>,
}

impl FeederConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| OidError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| OidError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub line: LineParams,
    pub pi: PiSection,
}

/// Electrical model of a radial feeder in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub base: PerUnitBase,
    pub roles: Vec<NodeRole>,
    pub names: Vec<String>,
    pub edges: Vec<Edge>,
    pub admittance: DMatrix<Complex64>,
    /// House node ids in ascending order; position is the house index.
    pub houses: Vec<usize>,
    pub poles: Vec<usize>,
}

impl FeederModel {
    pub fn num_nodes(&self) -> usize {
        self.roles.len()
    }

    pub fn num_houses(&self) -> usize {
        self.houses.len()
    }

    pub fn house_names(&self) -> Vec<String> {
        self.houses.iter().map(|&n| self.names[n].clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        build_admittance(&FeederConfig::load(path)?)
    }
}

/// Validates the topology, converts every line to per-unit and assembles
/// the bus admittance matrix.
pub fn build_admittance(config: &FeederConfig) -> Result<FeederModel> {
    let n = config.nodes.len();
    if n < 2 {
        return Err(OidError::Topology("feeder needs at least two nodes".into()));
    }
    let mut roles = vec![None; n];
    let mut names = vec![String::new(); n];
    for node in &config.nodes {
        if node.id >= n {
            return Err(OidError::Topology(format!(
                "node id {} out of range 0..{n}",
                node.id
            )));
        }
        if roles[node.id].is_some() {
            return Err(OidError::Topology(format!("duplicate node id {}", node.id)));
        }
        roles[node.id] = Some(node.role);
        names[node.id] = node.name.clone().unwrap_or_default();
    }
    let roles: Vec<NodeRole> = roles
        .into_iter()
        .map(|r| r.expect("ids are a permutation"))
        .collect();
    if roles[0] != NodeRole::Slack {
        return Err(OidError::Topology("node 0 must be the slack node".into()));
    }
    if roles.iter().filter(|&&r| r == NodeRole::Slack).count() != 1 {
        return Err(OidError::Topology(
            "exactly one slack node is required".into(),
        ));
    }

    let houses: Vec<usize> = (0..n).filter(|&i| roles[i] == NodeRole::House).collect();
    let poles: Vec<usize> = (0..n).filter(|&i| roles[i] == NodeRole::Pole).collect();
    for (k, &h) in houses.iter().enumerate() {
        if names[h].is_empty() {
            names[h] = format!("H{}", k + 1);
        }
    }
    for (i, name) in names.iter_mut().enumerate() {
        if name.is_empty() {
            *name = format!("N{i}");
        }
    }

    // radial: n-1 edges, no duplicates, connected
    if config.edges.len() != n - 1 {
        return Err(OidError::Topology(format!(
            "a radial feeder with {n} nodes needs {} edges, got {}",
            n - 1,
            config.edges.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut adjacency = vec![Vec::new(); n];
    for e in &config.edges {
        if e.from >= n || e.to >= n || e.from == e.to {
            return Err(OidError::Topology(format!(
                "bad edge {} -> {}",
                e.from, e.to
            )));
        }
        let key = (e.from.min(e.to), e.from.max(e.to));
        if !seen.insert(key) {
            return Err(OidError::Topology(format!(
                "duplicate edge {} -> {}",
                e.from, e.to
            )));
        }
        adjacency[e.from].push(e.to);
        adjacency[e.to].push(e.from);
    }
    let mut visited = vec![false; n];
    let mut stack = vec![0];
    visited[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adjacency[u] {
            if !visited[v] {
                visited[v] = true;
                stack.push(v);
            }
        }
    }
    if let Some(i) = visited.iter().position(|v| !v) {
        return Err(OidError::Topology(format!(
            "node {i} is not connected to the slack"
        )));
    }

    let mut edges = Vec::with_capacity(n - 1);
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for e in &config.edges {
        let pi = to_per_unit(&e.line, &config.base)?;
        let (a, b) = (e.from, e.to);
        let half = pi.shunt * 0.5;
        y[(a, a)] += pi.series + half;
        y[(b, b)] += pi.series + half;
        y[(a, b)] -= pi.series;
        y[(b, a)] -= pi.series;
        edges.push(Edge {
            from: a,
            to: b,
            line: e.line,
            pi,
        });
    }

    Ok(FeederModel {
        base: config.base,
        roles,
        names,
        edges,
        admittance: y,
        houses,
        poles,
    })
}

/// Real symmetric matrices whose trace against `V = vvᴴ` gives the ohmic
/// loss on each series branch, and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrices {
    pub per_edge: Vec<DMatrix<f64>>,
    pub total: DMatrix<f64>,
}

pub fn build_loss_matrices(model: &FeederModel) -> LossMatrices {
    let n = model.num_nodes();
    let mut total = DMatrix::zeros(n, n);
    let per_edge = model
        .edges
        .iter()
        .map(|e| {
            let g = e.pi.series.re;
            let mut m = DMatrix::zeros(n, n);
            m[(e.from, e.from)] = g;
            m[(e.to, e.to)] = g;
            m[(e.from, e.to)] = -g;
            m[(e.to, e.from)] = -g;
            total += &m;
            m
        })
        .collect();
    LossMatrices { per_edge, total }
}

/// The twelve-house secondary network: poles 2, 5, .., 17 chained from the
/// transformer at 50 m spacing, houses on either side of each pole on 20 m
/// drops.
pub fn twelve_house_config() -> FeederConfig {
    let mut nodes = vec![NodeConfig {
        id: 0,
        role: NodeRole::Slack,
        name: Some("TX".into()),
    }];
    let mut edges = Vec::new();
    let mut prev_pole = 0;
    for k in 0..6 {
        let pole = 3 * k + 2;
        let (a, b) = (3 * k + 1, 3 * k + 3);
        nodes.push(NodeConfig {
            id: a,
            role: NodeRole::House,
            name: Some(format!("H{}", 2 * k + 1)),
        });
        nodes.push(NodeConfig {
            id: pole,
            role: NodeRole::Pole,
            name: Some(format!("P{}", k + 1)),
        });
        nodes.push(NodeConfig {
            id: b,
            role: NodeRole::House,
            name: Some(format!("H{}", 2 * k + 2)),
        });
        edges.push(EdgeConfig {
            from: prev_pole,
            to: pole,
            line: LineParams::pole_pole(50.0),
        });
        for house in [a, b] {
            edges.push(EdgeConfig {
                from: pole,
                to: house,
                line: LineParams::drop(20.0),
            });
        }
        prev_pole = pole;
    }
    FeederConfig {
        base: PerUnitBase::default(),
        nodes,
        edges,
    }
}
