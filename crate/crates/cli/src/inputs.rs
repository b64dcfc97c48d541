use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use oid_core::feeder::FeederModel;
use oid_core::formulation::DispatchSpec;
use oid_core::scenario::{load_scenario, Scenario};
use oid_core::OidError;
use rayon::{ThreadPool, ThreadPoolBuilder};
use thiserror::Error;

use crate::{CaseArgs, RunArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_NOT_TIGHT: u8 = 2;
pub const EXIT_FLOOR: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or input files.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Input(OidError),
    #[error(transparent)]
    Run(OidError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => EXIT_USAGE,
            CliError::Run(OidError::NotTight { .. }) => EXIT_NOT_TIGHT,
            CliError::Run(_) | CliError::Io { .. } => EXIT_FAILED,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub struct Case {
    pub model: FeederModel,
    pub scenario: Scenario,
}

impl Case {
    pub fn load(args: &CaseArgs) -> Result<Self, CliError> {
        let model = FeederModel::load(&args.feeder).map_err(CliError::Input)?;
        let scenario =
            load_scenario(&model, &args.scenario, &args.inverters).map_err(CliError::Input)?;
        Ok(Self { model, scenario })
    }

    /// Resolves a step by exact time label, falling back to an index.
    pub fn step_index(&self, key: &str) -> Result<usize, CliError> {
        if let Some(i) = self.scenario.steps.iter().position(|s| s.time == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.scenario.steps.len() => Ok(i),
            _ => Err(CliError::Usage(format!(
                "no step `{key}` (scenario has {} steps)",
                self.scenario.steps.len()
            ))),
        }
    }

    /// Requested steps in scenario order.
    pub fn select(&self, step: Option<&str>) -> Result<Vec<usize>, CliError> {
        match step {
            Some(key) => Ok(vec![self.step_index(key)?]),
            None => Ok((0..self.scenario.steps.len()).collect()),
        }
    }
}

pub fn load_spec(path: &Path, houses: usize) -> Result<DispatchSpec, CliError> {
    let spec = DispatchSpec::load(path).map_err(CliError::Input)?;
    spec.validate(houses).map_err(CliError::Input)?;
    Ok(spec)
}

pub fn pool(run: &RunArgs) -> Result<ThreadPool, CliError> {
    let mut b = ThreadPoolBuilder::new();
    if let Some(n) = run.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(CliError::io(path))
}

/// File when given, stdout otherwise.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => Ok(Box::new(create(p)?)),
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}
