use std::fs;
use std::io::Write;
use std::path::Path;

use oid_core::feeder::FeederModel;
use oid_core::formulation::DispatchSpec;
use oid_core::metrics::{aggregate, write_steps_csv, write_summary_csv, StepMetrics, SummaryRow};
use oid_core::oracle::{baseline_injections, newton_power_flow, PowerFlowResult};
use oid_core::recovery::{solve_dispatch, DispatchSettings, DispatchSolution};
use oid_core::scenario::{synthesize_profiles, write_scenario_csv, BaseProfile, InverterSpecsFile};
use oid_core::strategies::{
    default_lambda_grid, select_lambda, strategy_spec, sweep_lambda, LambdaSelection, StrategyKind,
    SweepPoint, SweepWeight,
};
use oid_core::{OidError, Result as CoreResult};
use rayon::prelude::*;

use crate::dump::StepRecord;
use crate::inputs::{
    create, load_spec, output, pool, Case, CliError, EXIT_FAILED, EXIT_FLOOR, EXIT_NOT_TIGHT,
    EXIT_OK,
};
use crate::{CaseArgs, RunArgs};

/// Slack on `joint ≤ pinned` when checking objective dominance.
const DOMINANCE_TOL: f64 = 1e-7;

type Solved = Vec<CoreResult<DispatchSolution>>;

fn solve_steps(
    case: &Case,
    spec: &DispatchSpec,
    steps: &[usize],
    settings: &DispatchSettings,
) -> Solved {
    steps
        .par_iter()
        .map(|&i| {
            solve_dispatch(
                &case.model,
                &case.scenario,
                &case.scenario.steps[i],
                spec,
                settings,
            )
        })
        .collect()
}

fn exit_code(results: &Solved) -> u8 {
    if results.iter().any(|r| r.is_err()) {
        EXIT_FAILED
    } else if results
        .iter()
        .any(|r| r.as_ref().is_ok_and(|s| !s.is_tight()))
    {
        EXIT_NOT_TIGHT
    } else {
        EXIT_OK
    }
}

fn status_label(code: u8) -> &'static str {
    match code {
        EXIT_OK => "ok",
        EXIT_NOT_TIGHT => "not_tight",
        _ => "failed",
    }
}

fn report_problems(label: &str, case: &Case, steps: &[usize], results: &Solved) {
    for (&i, r) in steps.iter().zip(results) {
        let time = &case.scenario.steps[i].time;
        match r {
            Err(e) => eprintln!("{label} {time}: {e}"),
            Ok(s) if !s.is_tight() => {
                eprintln!("{label} {time}: not tight (ratio {:.3e})", s.rank_ratio)
            }
            Ok(_) => {}
        }
    }
}

fn step_metrics(case: &Case, steps: &[usize], results: &Solved) -> Vec<StepMetrics> {
    steps
        .iter()
        .zip(results)
        .filter_map(|(&i, r)| {
            let sol = r.as_ref().ok()?;
            Some(StepMetrics::from_solution(
                &case.scenario.steps[i].time,
                case.scenario.step_hours,
                sol,
                &case.model,
            ))
        })
        .collect()
}

fn reactive_kvarh(rows: &[StepMetrics], model: &FeederModel) -> f64 {
    rows.iter()
        .map(|r| model.base.pu_to_kw(r.reactive) * r.hours)
        .sum()
}

fn summary_row(
    label: &str,
    case: &Case,
    rows: &[StepMetrics],
    code: u8,
    retail_price: f64,
) -> CoreResult<SummaryRow> {
    let complete = code != EXIT_FAILED;
    Ok(SummaryRow {
        label: label.to_string(),
        status: status_label(code).to_string(),
        objective: complete.then(|| rows.iter().filter_map(|r| r.objective).sum()),
        reactive_kvarh: reactive_kvarh(rows, &case.model),
        summary: if complete {
            Some(aggregate(rows, &case.model.base, retail_price)?)
        } else {
            None
        },
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(CliError::io(path))
}

fn write_steps(path: &Path, rows: &[StepMetrics], model: &FeederModel) -> Result<(), CliError> {
    write_steps_csv(rows, &model.base, create(path)?).map_err(CliError::Run)
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    write_summary_csv(rows, create(path)?).map_err(CliError::Run)
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn solve(
    args: &CaseArgs,
    spec_path: &Path,
    step: Option<&str>,
    all: bool,
    out: &Path,
    retail_price: f64,
    run: &RunArgs,
) -> Result<u8, CliError> {
    let case = Case::load(args)?;
    let spec = load_spec(spec_path, case.model.num_houses())?;
    let steps = case.select(if all { None } else { step })?;
    let settings = DispatchSettings::from_env();
    let results = pool(run)?.install(|| solve_steps(&case, &spec, &steps, &settings));
    report_problems("solve", &case, &steps, &results);

    make_dir(out)?;
    let records: Vec<StepRecord> = steps
        .iter()
        .zip(&results)
        .map(|(&i, r)| {
            let time = &case.scenario.steps[i].time;
            match r {
                Ok(sol) => StepRecord::solved(time, sol, &case.model),
                Err(e) => StepRecord::failed(time, e.to_string()),
            }
        })
        .collect();
    write_json(&out.join("solution.json"), &records)?;
    let rows = step_metrics(&case, &steps, &results);
    write_steps(&out.join("steps.csv"), &rows, &case.model)?;
    let code = exit_code(&results);
    let label = if spec.name.is_empty() {
        "dispatch"
    } else {
        &spec.name
    };
    let summary = summary_row(label, &case, &rows, code, retail_price).map_err(CliError::Run)?;
    write_summary(&out.join("summary.csv"), &[summary])?;
    Ok(code)
}

fn write_sweep(points: &[SweepPoint], out: Option<&Path>) -> Result<(), CliError> {
    let mut sorted: Vec<&SweepPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    sorted.dedup_by(|a, b| a.lambda == b.lambda);
    let mut w = csv::Writer::from_writer(output(out)?);
    let err = |e: csv::Error| CliError::Run(OidError::Scenario(e.to_string()));
    w.write_record(["lambda", "count", "objective", "loss", "tight"])
        .map_err(err)?;
    for p in sorted {
        w.write_record([
            p.lambda.to_string(),
            p.count.map_or_else(String::new, |c| c.to_string()),
            p.objective.map_or_else(String::new, |v| format!("{v:.9e}")),
            p.loss.map_or_else(String::new, |v| format!("{v:.9e}")),
            p.tight.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| CliError::Run(OidError::Scenario(e.to_string())))
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    args: &CaseArgs,
    spec_path: &Path,
    step: &str,
    grid: Option<Vec<f64>>,
    target_k: Option<usize>,
    refine: usize,
    weight: &str,
    out: Option<&Path>,
    run: &RunArgs,
) -> Result<u8, CliError> {
    let case = Case::load(args)?;
    let spec = load_spec(spec_path, case.model.num_houses())?;
    let idx = case.step_index(step)?;
    let weight: SweepWeight = weight.parse().map_err(CliError::Input)?;
    let grid = grid.unwrap_or_else(default_lambda_grid);
    if grid.is_empty()
        || grid.windows(2).any(|w| w[1] <= w[0])
        || grid.iter().any(|&g| !(g >= 0.0) || !g.is_finite())
    {
        return Err(CliError::Usage(
            "grid must be nonnegative and strictly increasing".into(),
        ));
    }
    let settings = DispatchSettings::from_env();
    let scenario = &case.scenario;
    let at = &scenario.steps[idx];
    let pool = pool(run)?;

    let Some(k) = target_k else {
        let results = pool
            .install(|| sweep_lambda(&case.model, scenario, at, &spec, weight, &grid, &settings));
        let (points, solved): (Vec<SweepPoint>, Solved) = results.into_iter().unzip();
        write_sweep(&points, out)?;
        for p in &points {
            if let Some(e) = &p.error {
                eprintln!("sweep lambda={}: {e}", p.lambda);
            }
        }
        return Ok(exit_code(&solved));
    };

    let selection = pool.install(|| {
        select_lambda(
            &case.model,
            scenario,
            at,
            &spec,
            weight,
            k,
            &grid,
            refine,
            &settings,
        )
    });
    let selection = selection.map_err(CliError::Run)?;
    write_sweep(selection.sweep(), out)?;
    match selection {
        LambdaSelection::Selected {
            lambda, solution, ..
        } => {
            let count =
                StepMetrics::from_solution(&at.time, scenario.step_hours, &solution, &case.model)
                    .selected;
            eprintln!("selected lambda={lambda} controlling {count} inverters (target {k})");
            Ok(EXIT_OK)
        }
        LambdaSelection::FloorReached { floor, lambda, .. } => {
            eprintln!(
                "target {k} unattainable: floor of {floor} inverters reached at lambda={lambda}"
            );
            Ok(EXIT_FLOOR)
        }
    }
}

fn baseline_flows(case: &Case, steps: &[usize], v_slack: f64) -> Vec<CoreResult<PowerFlowResult>> {
    steps
        .iter()
        .map(|&i| {
            let injections = baseline_injections(&case.model, &case.scenario.steps[i]);
            newton_power_flow(&case.model, &injections, v_slack)
        })
        .collect()
}

fn label(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::Oid => "OID",
        StrategyKind::Rpc => "RPC",
        StrategyKind::Apc => "APC",
        StrategyKind::Mixed => "MIXED",
    }
}

/// Pinned strategies compared with the unpinned solve at the same weights.
fn check_dominance(
    kind: StrategyKind,
    case: &Case,
    steps: &[usize],
    pinned: &Solved,
    joint: &Solved,
    w: &mut csv::Writer<impl Write>,
) -> Result<bool, csv::Error> {
    let mut holds = true;
    for ((&i, p), j) in steps.iter().zip(pinned).zip(joint) {
        let (Ok(p), Ok(j)) = (p, j) else { continue };
        let (po, jo) = (p.objective.total, j.objective.total);
        let ok = jo <= po + DOMINANCE_TOL * po.abs().max(1.0);
        holds &= ok;
        w.write_record([
            label(kind).to_string(),
            case.scenario.steps[i].time.clone(),
            format!("{po:.9e}"),
            format!("{jo:.9e}"),
            ok.to_string(),
        ])?;
    }
    Ok(holds)
}

#[allow(clippy::too_many_arguments)]
pub fn compare(
    args: &CaseArgs,
    spec_path: &Path,
    strategies: &[String],
    step: Option<&str>,
    out: &Path,
    retail_price: f64,
    run: &RunArgs,
) -> Result<u8, CliError> {
    let case = Case::load(args)?;
    let base = load_spec(spec_path, case.model.num_houses())?;
    let kinds = strategies
        .iter()
        .map(|s| s.parse::<StrategyKind>())
        .collect::<CoreResult<Vec<_>>>()
        .map_err(CliError::Input)?;
    if kinds.is_empty() {
        return Err(CliError::Usage("no strategies given".into()));
    }
    let specs = kinds
        .iter()
        .map(|&k| strategy_spec(k, &base))
        .collect::<CoreResult<Vec<_>>>()
        .map_err(CliError::Input)?;
    let steps = case.select(step)?;
    let settings = DispatchSettings::from_env();
    let pool = pool(run)?;
    make_dir(out)?;

    let mut summary = Vec::with_capacity(kinds.len() + 1);
    let mut code = EXIT_OK;

    let v_slack = base.limits_for(&case.scenario).v_slack;
    let flows = baseline_flows(&case, &steps, v_slack);
    let no_control: Vec<StepMetrics> = steps
        .iter()
        .zip(&flows)
        .filter_map(|(&i, r)| {
            let pf = r.as_ref().ok()?;
            let step = &case.scenario.steps[i];
            Some(StepMetrics::from_power_flow(
                &step.time,
                case.scenario.step_hours,
                pf,
                &case.model,
            ))
        })
        .collect();
    for (&i, r) in steps.iter().zip(&flows) {
        if let Err(e) = r {
            eprintln!("no control {}: {e}", case.scenario.steps[i].time);
        }
    }
    let base_code = if flows.iter().any(|r| r.is_err()) {
        EXIT_FAILED
    } else {
        EXIT_OK
    };
    write_steps(&out.join("steps_no_control.csv"), &no_control, &case.model)?;
    let mut row = summary_row("No control", &case, &no_control, base_code, retail_price)
        .map_err(CliError::Run)?;
    row.objective = None;
    summary.push(row);
    code = code.max(base_code);

    let dom_path = out.join("dominance.csv");
    let mut dom = csv::Writer::from_writer(create(&dom_path)?);
    let csv_err = |e: csv::Error| CliError::Run(OidError::Scenario(e.to_string()));
    dom.write_record(["strategy", "time", "objective", "joint_objective", "holds"])
        .map_err(csv_err)?;
    let mut dominated = true;

    for (&kind, spec) in kinds.iter().zip(&specs) {
        let name = label(kind);
        let results = pool.install(|| solve_steps(&case, spec, &steps, &settings));
        report_problems(name, &case, &steps, &results);
        let rows = step_metrics(&case, &steps, &results);
        write_steps(
            &out.join(format!("steps_{}.csv", name.to_ascii_lowercase())),
            &rows,
            &case.model,
        )?;
        let c = exit_code(&results);
        summary.push(summary_row(name, &case, &rows, c, retail_price).map_err(CliError::Run)?);
        code = code.max(c);

        if spec.pin_curtailment || spec.pin_reactive {
            let joint_spec = spec.without_pins();
            let joint = pool.install(|| solve_steps(&case, &joint_spec, &steps, &settings));
            dominated &= check_dominance(kind, &case, &steps, &results, &joint, &mut dom)
                .map_err(csv_err)?;
        }
    }
    dom.flush().map_err(CliError::io(&dom_path))?;
    write_summary(&out.join("summary.csv"), &summary)?;
    if !dominated {
        eprintln!(
            "compare: joint control did not dominate a pinned strategy, see {}",
            dom_path.display()
        );
        code = EXIT_FAILED;
    }
    // non-tight is less severe than a failed row
    Ok(if code == EXIT_FAILED {
        EXIT_FAILED
    } else {
        code.min(EXIT_NOT_TIGHT)
    })
}

pub fn baseline(args: &CaseArgs, out: Option<&Path>) -> Result<u8, CliError> {
    let case = Case::load(args)?;
    let steps = case.select(None)?;
    let flows = baseline_flows(&case, &steps, case.scenario.limits.v_slack);
    let mut w = csv::Writer::from_writer(output(out)?);
    let err = |e: csv::Error| CliError::Run(OidError::Scenario(e.to_string()));
    let mut header = vec!["time".to_string()];
    header.extend(case.model.names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for (&i, flow) in steps.iter().zip(flows) {
        let time = &case.scenario.steps[i].time;
        let pf = flow.map_err(|e| {
            eprintln!("baseline {time}: power flow failed");
            CliError::Run(e)
        })?;
        let mut rec = vec![time.clone()];
        rec.extend(pf.magnitudes().iter().map(|m| format!("{m:.6}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()
        .map_err(|e| CliError::Run(OidError::Scenario(e.to_string())))?;
    Ok(EXIT_OK)
}

pub fn synth(
    feeder: &Path,
    profile: &Path,
    inverters: &Path,
    seed: u64,
    sigma: f64,
    pf: f64,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    if !(sigma >= 0.0) || !(pf > 0.0 && pf <= 1.0) {
        return Err(CliError::Usage(
            "sigma must be nonnegative and pf in (0, 1]".into(),
        ));
    }
    let model = FeederModel::load(feeder).map_err(CliError::Input)?;
    let profile = BaseProfile::load(profile).map_err(CliError::Input)?;
    let ratings = InverterSpecsFile::load(inverters).map_err(CliError::Input)?;
    let scenario = synthesize_profiles(&model, &profile, &ratings, seed, sigma, pf)
        .map_err(CliError::Input)?;
    write_scenario_csv(&model, &scenario, output(out)?).map_err(CliError::Run)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::EXIT_USAGE;

    #[test]
    fn usage_errors_map_to_64() {
        assert_eq!(CliError::Usage("x".into()).code(), EXIT_USAGE);
        assert_eq!(
            CliError::Input(OidError::Spec("x".into())).code(),
            EXIT_USAGE
        );
        assert_eq!(
            CliError::Run(OidError::NotTight { ratio: 0.1 }).code(),
            EXIT_NOT_TIGHT
        );
        assert_eq!(
            CliError::Run(OidError::Scenario("x".into())).code(),
            EXIT_FAILED
        );
    }

    #[test]
    fn status_labels() {
        assert_eq!(status_label(EXIT_OK), "ok");
        assert_eq!(status_label(EXIT_NOT_TIGHT), "not_tight");
        assert_eq!(status_label(EXIT_FAILED), "failed");
    }
}
