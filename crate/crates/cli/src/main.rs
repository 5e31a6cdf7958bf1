use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fermi_sse_cli::{config, run_config, sweep, CliError, Overrides, PointReport, RunMode};

#[derive(Parser)]
#[command(name = "fermi-sse", version, about = "Exact non-Markovian fermionic open-system scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config in the mode it declares (or the sweep it declares).
    Run(Common),
    /// Run one scenario per value of a config parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `bath.temperature_K`.
        #[arg(long)]
        param: String,
        /// Comma-separated TOML literals.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Run the exact consistency checks for a config.
    Validate(Common),
    /// Propagate and compare against the exact oracle.
    OracleCompare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `run.output`, else `out/<config stem>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Oracle comparison tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

fn out_dir(common: &Common, cfg: &config::ScenarioConfig) -> PathBuf {
    common.out.clone().or_else(|| cfg.run.as_ref().and_then(|r| r.output.as_ref().map(PathBuf::from))).unwrap_or_else(
        || Path::new("out").join(common.config.file_stem().unwrap_or_default()),
    )
}

fn report(points: &[PointReport]) -> bool {
    let mut ok = true;
    for p in points {
        let prefix = if p.label.is_empty() { String::new() } else { format!("[{}] ", p.label) };
        for c in &p.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            println!("{prefix}{status} {}: {:.3e} (tolerance {:.1e})", c.name, c.value, c.tolerance);
        }
        println!("{prefix}artifacts in {}", p.directory.display());
        ok &= p.passed;
    }
    ok
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    let (common, mode) = match &cli.command {
        Command::Run(c) | Command::Sweep { common: c, .. } => (c, None),
        Command::Validate(c) => (c, Some(RunMode::Validate)),
        Command::OracleCompare(c) => (c, Some(RunMode::OracleCompare)),
    };
    let cfg = config::load(&common.config)?;
    let out = out_dir(common, &cfg);
    let ov = Overrides { mode, tolerance: common.tolerance };
    let points = match &cli.command {
        Command::Sweep { param, values, .. } => {
            let values: Vec<toml::Value> = values.iter().map(|v| config::parse_value(v)).collect();
            let mut base = cfg.clone();
            base.sweep = None;
            sweep(&base, param, &values, &out, &ov)?
        }
        _ => run_config(&cfg, &out, &ov)?,
    };
    Ok(report(&points))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
