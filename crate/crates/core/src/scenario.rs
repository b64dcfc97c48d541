//! Time-series operating conditions: available PV power, loads and
//! inverter ratings.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OidError, Result};
use crate::feeder::FeederModel;

/// Tolerance for `p_avail ≤ s_rating` on ingest (kW rounding in CSVs).
const RATING_SLACK_PU: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub v_min: f64,
    pub v_max: f64,
    /// Fixed magnitude at the slack node.
    pub v_slack: f64,
}

impl Default for VoltageLimits {
    fn default() -> Self {
        Self {
            v_min: 0.917,
            v_max: 1.042,
            v_slack: 1.02,
        }
    }
}

impl VoltageLimits {
    pub fn validate(&self) -> Result<()> {
        let ok = self.v_min > 0.0
            && self.v_min <= self.v_max
            && self.v_slack > 0.0
            && [self.v_min, self.v_max, self.v_slack]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(OidError::Scenario(format!("bad voltage limits {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterSpec {
    pub node: usize,
    /// Apparent-power rating, pu.
    pub s_rating: f64,
    pub pf_min: f64,
}

impl InverterSpec {
    pub fn tan_theta(&self) -> f64 {
        self.pf_min.acos().tan()
    }
}

/// One line of the inverter specs file, in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterRating {
    pub node: usize,
    pub dc_kw: f64,
    pub derating: f64,
    pub oversize: f64,
    pub pf_min: f64,
}

impl InverterRating {
    pub fn ac_kw(&self) -> f64 {
        self.dc_kw * self.derating
    }

    pub fn s_kva(&self) -> f64 {
        self.oversize * self.ac_kw()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterSpecsFile {
    #[serde(default)]
    pub limits: VoltageLimits,
    pub inverters: Vec<InverterRating>,
}

impl InverterSpecsFile {
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

    /// Ratings ordered by house index of `feeder`.
    pub fn to_specs(&self, feeder: &FeederModel) -> Result<Vec<InverterSpec>> {
        self.limits.validate()?;
        feeder
            .houses
            .iter()
            .map(|&node| {
                let matches: Vec<_> = self.inverters.iter().filter(|r| r.node == node).collect();
                let r = match matches.as_slice() {
                    [r] => *r,
                    [] => {
                        return Err(OidError::Scenario(format!(
                            "no inverter rating for house node {node}"
                        )))
                    }
                    _ => {
                        return Err(OidError::Scenario(format!(
                            "duplicate inverter rating for node {node}"
                        )))
                    }
                };
                if !(r.pf_min > 0.0 && r.pf_min <= 1.0) {
                    return Err(OidError::Scenario(format!(
                        "node {node}: pf_min must lie in (0, 1]"
                    )));
                }
                let s = feeder.base.kw_to_pu(r.s_kva());
                if !(s > 0.0 && s.is_finite()) {
                    return Err(OidError::Scenario(format!(
                        "node {node}: rating must be positive"
                    )));
                }
                Ok(InverterSpec {
                    node,
                    s_rating: s,
                    pf_min: r.pf_min,
                })
            })
            .chain(
                self.inverters
                    .iter()
                    .filter(|r| !feeder.houses.contains(&r.node))
                    .map(|r| {
                        Err(OidError::Scenario(format!(
                            "inverter rating for non-house node {}",
                            r.node
                        )))
                    }),
            )
            .collect()
    }
}

/// DC ratings of the twelve-house network, in house order.
pub const TWELVE_HOUSE_DC_KW: [f64; 12] = [
    5.52, 5.70, 9.0, 9.0, 9.0, 5.70, 9.0, 5.70, 5.52, 5.52, 5.70, 9.0,
];

pub fn twelve_house_ratings(feeder: &FeederModel) -> InverterSpecsFile {
    InverterSpecsFile {
        limits: VoltageLimits::default(),
        inverters: feeder
            .houses
            .iter()
            .zip(TWELVE_HOUSE_DC_KW)
            .map(|(&node, dc_kw)| InverterRating {
                node,
                dc_kw,
                derating: 0.77,
                oversize: 1.1,
                pf_min: 0.85,
            })
            .collect(),
    }
}

/// Operating conditions at one instant, pu, indexed by house.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub time: String,
    pub p_avail: Vec<f64>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub steps: Vec<ScenarioStep>,
    pub step_hours: f64,
    pub inverters: Vec<InverterSpec>,
    pub limits: VoltageLimits,
}

impl Scenario {
    /// Index of the step with the largest total net injection.
    pub fn peak_step(&self) -> Option<usize> {
        let net =
            |s: &ScenarioStep| -> f64 { s.p_avail.iter().zip(&s.p_load).map(|(a, l)| a - l).sum() };
        (0..self.steps.len()).max_by(|&a, &b| net(&self.steps[a]).total_cmp(&net(&self.steps[b])))
    }
}

fn parse_hours(s: &str) -> Option<f64> {
    if let Some((h, m)) = s.split_once(':') {
        let h: f64 = h.trim().parse().ok()?;
        let m: f64 = m.trim().parse().ok()?;
        Some(h + m / 60.0)
    } else {
        s.trim().parse().ok()
    }
}

fn reactive_ratio(pf: f64) -> f64 {
    pf.acos().tan()
}

/// Reads a scenario CSV (kW) and an inverter specs file and converts to pu.
pub fn load_scenario(feeder: &FeederModel, csv_path: &Path, specs_path: &Path) -> Result<Scenario> {
    let specs_file = InverterSpecsFile::load(specs_path)?;
    let inverters = specs_file.to_specs(feeder)?;
    let file = std::fs::File::open(csv_path).map_err(|source| OidError::Io {
        path: csv_path.display().to_string(),
        source,
    })?;
    read_scenario(
        feeder,
        file,
        &csv_path.display().to_string(),
        inverters,
        specs_file.limits,
    )
}

pub fn read_scenario(
    feeder: &FeederModel,
    reader: impl std::io::Read,
    source: &str,
    inverters: Vec<InverterSpec>,
    limits: VoltageLimits,
) -> Result<Scenario> {
    let parse_err = |line: Option<u64>, message: String| OidError::Parse {
        path: match line {
            Some(l) => format!("{source}:{l}"),
            None => source.to_string(),
        },
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(Some(1), e.to_string()))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let time_col = col("time").ok_or_else(|| parse_err(Some(1), "missing column `time`".into()))?;
    let names = feeder.house_names();
    let mut pav = Vec::new();
    let mut pld = Vec::new();
    let mut qld = Vec::new();
    for name in &names {
        for (suffix, dst) in [("pavail", &mut pav), ("pload", &mut pld)] {
            let c = format!("{name}_{suffix}");
            dst.push(col(&c).ok_or_else(|| parse_err(Some(1), format!("missing column `{c}`")))?);
        }
        qld.push(col(&format!("{name}_qload")));
    }
    let has_q = qld.iter().any(Option::is_some);
    if has_q && qld.iter().any(Option::is_none) {
        return Err(parse_err(
            Some(1),
            "reactive load columns must cover every house or none".into(),
        ));
    }

    let base = feeder.base;
    let q_ratio = reactive_ratio(0.9);
    let mut steps = Vec::new();
    let mut times = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()), e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        let field = |i: usize, what: &str| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(line, format!("{what}: cannot parse `{raw}` as a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("{what}: non-finite value")));
            }
            Ok(v)
        };
        let time = rec.get(time_col).unwrap_or("").to_string();
        times
            .push(parse_hours(&time).ok_or_else(|| parse_err(line, format!("bad time `{time}`")))?);
        let mut step = ScenarioStep {
            time,
            p_avail: Vec::new(),
            p_load: Vec::new(),
            q_load: Vec::new(),
        };
        for (k, name) in names.iter().enumerate() {
            let p = base.kw_to_pu(field(pav[k], &format!("{name}_pavail"))?);
            if p < 0.0 {
                return Err(parse_err(line, format!("{name}: negative available power")));
            }
            if p > inverters[k].s_rating + RATING_SLACK_PU {
                return Err(parse_err(
                    line,
                    format!(
                        "{name}: available power {p} pu exceeds rating {} pu",
                        inverters[k].s_rating
                    ),
                ));
            }
            let pl = base.kw_to_pu(field(pld[k], &format!("{name}_pload"))?);
            let ql = match qld[k] {
                Some(c) => base.kw_to_pu(field(c, &format!("{name}_qload"))?),
                None => pl * q_ratio,
            };
            step.p_avail.push(p);
            step.p_load.push(pl);
            step.q_load.push(ql);
        }
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(OidError::Scenario(format!(
            "{source}: scenario has no steps"
        )));
    }
    let step_hours = uniform_step(&times).map_err(|m| parse_err(None, m))?;
    Ok(Scenario {
        steps,
        step_hours,
        inverters,
        limits,
    })
}

fn uniform_step(times: &[f64]) -> std::result::Result<f64, String> {
    if times.len() < 2 {
        return Ok(1.0);
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return Err("time column must be increasing".into());
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 {
            return Err(format!("non-uniform step duration at time {}", w[1]));
        }
    }
    Ok(dt)
}

/// Shared shape of a day: PV output per kW of DC capacity (after
/// irradiance, before derating) and the mean household load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseProfile {
    pub time: Vec<String>,
    pub pv_per_kw_dc: Vec<f64>,
    pub base_load_kw: Vec<f64>,
}

impl BaseProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let src = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| OidError::Parse {
                path: src.clone(),
                message: e.to_string(),
            })?;
        let mut out = BaseProfile {
            time: Vec::new(),
            pv_per_kw_dc: Vec::new(),
            base_load_kw: Vec::new(),
        };
        #[derive(Deserialize)]
        struct Row {
            time: String,
            pv_per_kw_dc: f64,
            base_load_kw: f64,
        }
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| OidError::Parse {
                path: format!("{src}:{}", e.position().map_or(0, |p| p.line())),
                message: e.to_string(),
            })?;
            out.time.push(row.time);
            out.pv_per_kw_dc.push(row.pv_per_kw_dc);
            out.base_load_kw.push(row.base_load_kw);
        }
        Ok(out)
    }
}

/// Scenario with per-house loads `base + N(0, σ)` (clamped at zero) and
/// reactive loads at power factor `pf`. Draw order is step-major.
pub fn synthesize_profiles(
    feeder: &FeederModel,
    profile: &BaseProfile,
    ratings: &InverterSpecsFile,
    seed: u64,
    sigma_w: f64,
    pf: f64,
) -> Result<Scenario> {
    let inverters = ratings.to_specs(feeder)?;
    if profile.base_load_kw.iter().any(|&l| !(l > 0.0))
        || profile.pv_per_kw_dc.iter().any(|&p| !(p >= 0.0))
    {
        return Err(OidError::Scenario("base profile must be positive".into()));
    }
    let times: Option<Vec<f64>> = profile.time.iter().map(|t| parse_hours(t)).collect();
    let times = times.ok_or_else(|| OidError::Scenario("bad time in base profile".into()))?;
    let step_hours = uniform_step(&times).map_err(OidError::Scenario)?;
    let normal = Normal::new(0.0, sigma_w).map_err(|e| OidError::Scenario(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = feeder.base;
    let q_ratio = reactive_ratio(pf);
    let ac_kw: Vec<f64> = feeder
        .houses
        .iter()
        .map(|&n| {
            ratings
                .inverters
                .iter()
                .find(|r| r.node == n)
                .map(|r| r.ac_kw())
                .unwrap_or(0.0)
        })
        .collect();
    let steps = profile
        .time
        .iter()
        .enumerate()
        .map(|(t, time)| {
            let mut step = ScenarioStep {
                time: time.clone(),
                p_avail: Vec::new(),
                p_load: Vec::new(),
                q_load: Vec::new(),
            };
            for &ac in &ac_kw {
                let noise_w: f64 = if sigma_w > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                let load_kw = (profile.base_load_kw[t] + noise_w / 1e3).max(0.0);
                step.p_avail
                    .push(base.kw_to_pu(ac * profile.pv_per_kw_dc[t]));
                step.p_load.push(base.kw_to_pu(load_kw));
                step.q_load.push(base.kw_to_pu(load_kw) * q_ratio);
            }
            step
        })
        .collect();
    Ok(Scenario {
        steps,
        step_hours,
        inverters,
        limits: ratings.limits,
    })
}

/// Writes the scenario in the CSV schema `load_scenario` reads, kW with six
/// decimals.
pub fn write_scenario_csv(
    feeder: &FeederModel,
    scenario: &Scenario,
    out: impl Write,
) -> Result<()> {
    let names = feeder.house_names();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    for suffix in ["pavail", "pload", "qload"] {
        header.extend(names.iter().map(|n| format!("{n}_{suffix}")));
    }
    let io = |e: csv::Error| OidError::Scenario(e.to_string());
    w.write_record(&header).map_err(io)?;
    for s in &scenario.steps {
        let mut rec = vec![s.time.clone()];
        for v in [&s.p_avail, &s.p_load, &s.q_load] {
            rec.extend(v.iter().map(|x| format!("{:.6}", feeder.base.pu_to_kw(*x))));
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| OidError::Scenario(e.to_string()))?;
    Ok(())
}

/// Operating regions of a single inverter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingRegion {
    /// Full available active power, reactive power within the rating.
    Reactive,
    /// Curtailment only, unity power factor.
    Curtail,
    /// Joint curtailment and reactive support, optional power-factor cut.
    Joint { enforce_pf: bool },
}

/// Whether `(p_s, q_s)` is an admissible setpoint for `spec` given the
/// available power, up to an absolute tolerance.
pub fn feasible_set_membership_tol(
    spec: &InverterSpec,
    p_avail: f64,
    p_s: f64,
    q_s: f64,
    region: OperatingRegion,
    tol: f64,
) -> bool {
    let s2 = spec.s_rating * spec.s_rating;
    match region {
        OperatingRegion::Reactive => {
            (p_s - p_avail).abs() <= tol && q_s * q_s <= s2 - p_avail * p_avail + tol
        }
        OperatingRegion::Curtail => p_s >= -tol && p_s <= p_avail + tol && q_s.abs() <= tol,
        OperatingRegion::Joint { enforce_pf } => {
            let in_box = p_s >= -tol && p_s <= p_avail + tol && q_s * q_s + p_s * p_s <= s2 + tol;
            in_box && (!enforce_pf || q_s.abs() <= spec.tan_theta() * p_s + tol)
        }
    }
}

pub fn feasible_set_membership(
    spec: &InverterSpec,
    p_avail: f64,
    p_s: f64,
    q_s: f64,
    region: OperatingRegion,
) -> bool {
    feasible_set_membership_tol(spec, p_avail, p_s, q_s, region, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_admittance, twelve_house_config};
    use proptest::prelude::*;

    fn feeder() -> FeederModel {
        build_admittance(&twelve_house_config()).unwrap()
    }

    fn csv_text(rows: usize, h1_pavail: f64) -> String {
        let f = feeder();
        let names = f.house_names();
        let mut s = String::from("time");
        for suf in ["pavail", "pload"] {
            for n in &names {
                s += &format!(",{n}_{suf}");
            }
        }
        s.push('\n');
        for r in 0..rows {
            s += &format!("{r}:00");
            for k in 0..12 {
                s += &format!(",{}", if k == 0 { h1_pavail } else { 1.0 });
            }
            for _ in 0..12 {
                s += ",0.5";
            }
            s.push('\n');
        }
        s
    }

    fn specs() -> Vec<InverterSpec> {
        let f = feeder();
        twelve_house_ratings(&f).to_specs(&f).unwrap()
    }

    #[test]
    fn reads_rows_and_converts_units() {
        let f = feeder();
        let sc = read_scenario(
            &f,
            csv_text(24, 5.52 * 0.77).as_bytes(),
            "t",
            specs(),
            VoltageLimits::default(),
        )
        .unwrap();
        assert_eq!(sc.steps.len(), 24);
        assert!((sc.steps[0].p_avail[0] - 0.42504).abs() < 1e-12);
        assert_eq!(sc.step_hours, 1.0);
        // reactive load defaults to PF 0.9
        let q = sc.steps[0].q_load[0];
        assert!((q - 0.05 * (1.0f64 - 0.81).sqrt() / 0.9).abs() < 1e-12);
    }

    #[test]
    fn oversized_rating() {
        let f = feeder();
        let s = specs();
        assert!((s[0].s_rating - 1.1 * 0.77 * 5.52 / 10.0).abs() < 1e-12);
        assert!((s[2].s_rating - 1.1 * 0.77 * 9.0 / 10.0).abs() < 1e-12);
        assert_eq!(s.iter().map(|x| x.node).collect::<Vec<_>>(), f.houses);
    }

    #[test]
    fn ingest_errors() {
        let f = feeder();
        let bad = csv_text(2, -1.0);
        let e =
            read_scenario(&f, bad.as_bytes(), "t", specs(), VoltageLimits::default()).unwrap_err();
        assert!(e.to_string().contains("negative"), "{e}");
        assert!(e.to_string().contains("t:2"), "{e}");
        let over = csv_text(2, 10.0);
        assert!(
            read_scenario(&f, over.as_bytes(), "t", specs(), VoltageLimits::default()).is_err()
        );
        let missing = csv_text(2, 1.0).replace("H7_pload", "H7_x");
        let e = read_scenario(
            &f,
            missing.as_bytes(),
            "t",
            specs(),
            VoltageLimits::default(),
        )
        .unwrap_err();
        assert!(e.to_string().contains("H7_pload"));
        let empty = csv_text(0, 1.0);
        assert!(
            read_scenario(&f, empty.as_bytes(), "t", specs(), VoltageLimits::default()).is_err()
        );
    }

    fn flat_profile() -> BaseProfile {
        BaseProfile {
            time: (0..24).map(|h| format!("{h:02}:00")).collect(),
            pv_per_kw_dc: (0..24)
                .map(|h| if (6..19).contains(&h) { 0.5 } else { 0.0 })
                .collect(),
            base_load_kw: vec![1.0; 24],
        }
    }

    #[test]
    fn zero_noise_reproduces_base() {
        let f = feeder();
        let sc = synthesize_profiles(&f, &flat_profile(), &twelve_house_ratings(&f), 7, 0.0, 0.9)
            .unwrap();
        for s in &sc.steps {
            assert!(s.p_load.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let f = feeder();
        let r = twelve_house_ratings(&f);
        let a = synthesize_profiles(&f, &flat_profile(), &r, 42, 200.0, 0.9).unwrap();
        let b = synthesize_profiles(&f, &flat_profile(), &r, 42, 200.0, 0.9).unwrap();
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_scenario_csv(&f, &a, &mut x).unwrap();
        write_scenario_csv(&f, &b, &mut y).unwrap();
        assert_eq!(x, y);
        let c = synthesize_profiles(&f, &flat_profile(), &r, 43, 200.0, 0.9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturbation_mean_is_unbiased() {
        // 10⁴ draws with a base load far from zero so clamping never applies
        let f = feeder();
        let profile = BaseProfile {
            time: (0..834).map(|h| format!("{h}")).collect(),
            pv_per_kw_dc: vec![0.0; 834],
            base_load_kw: vec![5.0; 834],
        };
        let sc =
            synthesize_profiles(&f, &profile, &twelve_house_ratings(&f), 1, 200.0, 0.9).unwrap();
        let draws: Vec<f64> = sc
            .steps
            .iter()
            .flat_map(|s| s.p_load.iter().map(|p| f.base.pu_to_kw(*p) * 1e3 - 5000.0))
            .collect();
        assert!(draws.len() >= 10_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() <= 3.0 * 200.0 / 100.0, "mean {mean}");
    }

    #[test]
    fn csv_round_trip() {
        let f = feeder();
        let r = twelve_house_ratings(&f);
        let sc = synthesize_profiles(&f, &flat_profile(), &r, 42, 200.0, 0.9).unwrap();
        let mut buf = Vec::new();
        write_scenario_csv(&f, &sc, &mut buf).unwrap();
        let back =
            read_scenario(&f, buf.as_slice(), "mem", sc.inverters.clone(), sc.limits).unwrap();
        for (a, b) in sc.steps.iter().zip(&back.steps) {
            for k in 0..12 {
                assert!((a.p_load[k] - b.p_load[k]).abs() < 1e-7);
                assert!((a.q_load[k] - b.q_load[k]).abs() < 1e-7);
            }
        }
    }

    fn inv(s: f64) -> InverterSpec {
        InverterSpec {
            node: 1,
            s_rating: s,
            pf_min: 0.85,
        }
    }

    #[test]
    fn membership_examples() {
        let spec = inv(0.5);
        assert!(feasible_set_membership(
            &spec,
            0.5,
            0.5,
            0.0,
            OperatingRegion::Reactive
        ));
        assert!(!feasible_set_membership(
            &spec,
            0.5,
            0.5,
            0.01,
            OperatingRegion::Reactive
        ));
        for region in [
            OperatingRegion::Reactive,
            OperatingRegion::Curtail,
            OperatingRegion::Joint { enforce_pf: true },
            OperatingRegion::Joint { enforce_pf: false },
        ] {
            assert!(feasible_set_membership(&spec, 0.4, 0.4, 0.0, region));
        }
        // tan(acos 0.85)·0.4 = 0.2479
        assert!(!feasible_set_membership(
            &spec,
            0.45,
            0.4,
            0.3,
            OperatingRegion::Joint { enforce_pf: true }
        ));
        assert!(feasible_set_membership(
            &spec,
            0.45,
            0.4,
            0.24,
            OperatingRegion::Joint { enforce_pf: true }
        ));
    }

    proptest! {
        #[test]
        fn restricted_regions_are_subsets(
            s in 0.1f64..1.0, frac in 0.0f64..1.0, ps in -0.1f64..1.1, qs in -1.0f64..1.0,
        ) {
            let spec = inv(s);
            let p_avail = frac * s;
            let joint = |p: f64, q: f64| {
                feasible_set_membership(&spec, p_avail, p, q, OperatingRegion::Joint { enforce_pf: false })
            };
            // sample each restricted region on its own support
            if feasible_set_membership(&spec, p_avail, p_avail, qs, OperatingRegion::Reactive) {
                prop_assert!(joint(p_avail, qs));
            }
            if feasible_set_membership(&spec, p_avail, ps, 0.0, OperatingRegion::Curtail) {
                prop_assert!(joint(ps, 0.0));
            }
            // the pf-restricted joint region is a subset too
            if feasible_set_membership(&spec, p_avail, ps, qs, OperatingRegion::Joint { enforce_pf: true }) {
                prop_assert!(joint(ps, qs));
            }
        }
    }
}
