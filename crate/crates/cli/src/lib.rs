//! Config-driven scenario runner for `fermi-sse`.
//!
//! A scenario config names a model, its bath(s), a time grid and a run mode.
//! [`run_config`] executes it (or the sweep it declares) and writes CSV
//! artifacts plus a `metadata.toml` record per run.

pub mod config;
pub mod run;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, RunMode, Scenario, ScenarioConfig};
pub use run::{execute, Check, RunError, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("sweep point {label}: {source}")]
    SweepPoint { label: String, source: Box<CliError> },
}

impl CliError {
    /// Process exit status: 2 for config problems, 3 for solver or I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Run(_) => 3,
            Self::SweepPoint { source, .. } => source.exit_code(),
        }
    }
}

/// Overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<RunMode>,
    pub tolerance: Option<f64>,
}

/// Result of one run inside an invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointReport {
    pub label: String,
    pub directory: PathBuf,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn scenario(cfg: &ScenarioConfig, ov: &Overrides) -> Result<Scenario, ConfigError> {
    let mut sc = Scenario::from_config(cfg)?;
    if let Some(m) = ov.mode {
        sc.mode = m;
    }
    if ov.tolerance.is_some() {
        sc.compare_tolerance = ov.tolerance;
    }
    Ok(sc)
}

/// Runs a single config, or the sweep it declares, into `out`.
pub fn run_config(cfg: &ScenarioConfig, out: &Path, ov: &Overrides) -> Result<Vec<PointReport>, CliError> {
    match &cfg.sweep {
        Some(s) => {
            let mut base = cfg.clone();
            base.sweep = None;
            sweep(&base, &s.parameter, &s.values, out, ov)
        }
        None => {
            let sc = scenario(cfg, ov)?;
            let outcome = execute(&sc, cfg, out)?;
            Ok(vec![PointReport {
                label: String::new(),
                directory: out.into(),
                passed: outcome.passed(),
                checks: outcome.checks,
            }])
        }
    }
}

fn label(parameter: &str, value: &toml::Value) -> String {
    let key = parameter.rsplit('.').next().unwrap_or(parameter);
    let v = match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let clean: String =
        v.chars().map(|c| if c.is_ascii_alphanumeric() || "+-._".contains(c) { c } else { '_' }).collect();
    format!("{key}={clean}")
}

#[derive(Serialize)]
struct SweepIndex<'a> {
    parameter: &'a str,
    points: &'a [PointReport],
}

/// Runs one independent scenario per value, concurrently, each in its own
/// directory under `out`, and writes `sweep_index.toml`.
pub fn sweep(
    cfg: &ScenarioConfig,
    parameter: &str,
    values: &[toml::Value],
    out: &Path,
    ov: &Overrides,
) -> Result<Vec<PointReport>, CliError> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let points: Vec<(String, ScenarioConfig, Scenario)> = values
        .iter()
        .map(|v| {
            let c = config::with_parameter(cfg, parameter, v)?;
            let sc = scenario(&c, ov)?;
            Ok((label(parameter, v), c, sc))
        })
        .collect::<Result<_, ConfigError>>()?;
    let reports: Vec<PointReport> = points
        .par_iter()
        .map(|(label, c, sc)| {
            let dir = out.join(label);
            let outcome = execute(sc, c, &dir)
                .map_err(|e| CliError::SweepPoint { label: label.clone(), source: Box::new(e.into()) })?;
            Ok(PointReport { label: label.clone(), directory: dir, passed: outcome.passed(), checks: outcome.checks })
        })
        .collect::<Result<_, CliError>>()?;
    let index = SweepIndex { parameter, points: &reports };
    let text = toml::to_string(&index).map_err(|e| RunError::Metadata(e.to_string()))?;
    let path = out.join("sweep_index.toml");
    std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })?;
    Ok(reports)
}
