//! `oid`: batch front end for the dispatch library.
//!
//! Exit codes: 0 success, 1 solver failure or infeasible step, 2 relaxation
//! not tight, 3 target count below the attainable floor, 64 usage or input
//! error.

mod commands;
mod dump;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::inputs::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "oid",
    version,
    about = "Optimal inverter dispatch on radial feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    /// Feeder description (JSON).
    #[arg(long)]
    pub feeder: PathBuf,
    /// Operating conditions per step (CSV, kW).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Inverter ratings and voltage limits (JSON).
    #[arg(long)]
    pub inverters: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Upper bound on concurrent solves; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one step or the whole scenario and write a report directory.
    Solve {
        #[command(flatten)]
        case: CaseArgs,
        /// Dispatch spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Step to solve, by time label or zero-based index.
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        step: Option<String>,
        /// Solve every step.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
        /// Electricity price for the economic columns, $/kWh.
        #[arg(long, default_value_t = oid_core::metrics::DEFAULT_RETAIL_PRICE)]
        retail_price: f64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep a regularization weight at one step.
    SweepLambda {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        step: String,
        /// Comma-separated increasing weights. Defaults to 0 plus a log grid
        /// over [1e-3, 10] when only --target-k is given.
        #[arg(long, value_delimiter = ',', required_unless_present = "target_k")]
        grid: Option<Vec<f64>>,
        /// Find the smallest weight controlling at most this many inverters.
        #[arg(long)]
        target_k: Option<usize>,
        /// Bisection steps after the bracketing grid point.
        #[arg(long, default_value_t = 5)]
        refine: usize,
        /// Weight to vary: group, active or reactive.
        #[arg(long, default_value = "group")]
        weight: String,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare strategies against each other and against no control.
    Compare {
        #[command(flatten)]
        case: CaseArgs,
        /// Base spec; each strategy applies its own pins to it.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "rpc,apc,oid,mixed")]
        strategies: Vec<String>,
        /// Restrict to one step; all steps otherwise.
        #[arg(long)]
        step: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = oid_core::metrics::DEFAULT_RETAIL_PRICE)]
        retail_price: f64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Voltage profile with every inverter at full output and unity power
    /// factor.
    Baseline {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a scenario CSV from a base profile.
    Synth {
        #[arg(long)]
        feeder: PathBuf,
        /// Base profile CSV: time, pv_per_kw_dc, base_load_kw.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        inverters: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Standard deviation of the per-house load noise, W.
        #[arg(long, default_value_t = 200.0)]
        sigma: f64,
        /// Power factor of the loads.
        #[arg(long, default_value_t = 0.9)]
        pf: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Solve {
            case,
            spec,
            step,
            all,
            out,
            retail_price,
            run,
        } => commands::solve(&case, &spec, step.as_deref(), all, &out, retail_price, &run),
        Command::SweepLambda {
            case,
            spec,
            step,
            grid,
            target_k,
            refine,
            weight,
            out,
            run,
        } => commands::sweep(
            &case,
            &spec,
            &step,
            grid,
            target_k,
            refine,
            &weight,
            out.as_deref(),
            &run,
        ),
        Command::Compare {
            case,
            spec,
            strategies,
            step,
            out,
            retail_price,
            run,
        } => commands::compare(
            &case,
            &spec,
            &strategies,
            step.as_deref(),
            &out,
            retail_price,
            &run,
        ),
        Command::Baseline { case, out } => commands::baseline(&case, out.as_deref()),
        Command::Synth {
            feeder,
            profile,
            inverters,
            seed,
            sigma,
            pf,
            out,
        } => commands::synth(
            &feeder,
            &profile,
            &inverters,
            seed,
            sigma,
            pf,
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("oid: {e}");
            ExitCode::from(e.code())
        }
    }
}
