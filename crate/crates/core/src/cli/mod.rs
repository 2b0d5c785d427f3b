//! Command-line front end: `validate`, `run` and `analyze`.
//!
//! Exit codes: 0 success, 2 invalid configuration or log, 3 divergence,
//! 4 I/O failure. The output directory is taken from `--out`, then the
//! `FORMATION_OUT_DIR` environment variable, then `output.dir`.

pub mod config;
pub mod io;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::analyze;
use crate::sim::run_scenario;
use crate::Error;
pub use config::{parse_config, BuiltScenario, Issue, ScenarioConfig};

pub const OUT_DIR_ENV: &str = "FORMATION_OUT_DIR";

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "formation",
    version,
    about = "Distributed formation control with cooperative learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file and report every problem found.
    Validate(ConfigArgs),
    /// Simulate a scenario and write log.csv, weights.csv and metadata.json.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics and verdicts for a run directory.
    Analyze {
        /// Directory written by `run`.
        run_dir: PathBuf,
        /// Scenario file to use instead of the one recorded with the run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` applied to the scenario, e.g. `analysis.steady_fraction=0.3`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Where report.json and metrics.csv go. Default: the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Scenario TOML file.
    pub config: PathBuf,
    /// `key=value` with a dotted key, e.g. `run.t_end=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Invalid(Vec<Issue>),
    Diverged { t: f64, component: String, dir: PathBuf },
    Io(Error),
    Failed(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) | CliError::Failed(_) => EXIT_INVALID,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => CliError::Io(e),
            Error::Csv(ref c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(e),
            Error::Json(ref j) if j.is_io() => CliError::Io(e),
            other => CliError::Failed(other),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(issues) => {
                write!(
                    f,
                    "invalid scenario ({} problem{})",
                    issues.len(),
                    if issues.len() == 1 { "" } else { "s" }
                )?;
                for i in issues {
                    write!(f, "\n  {i}")?;
                }
                Ok(())
            }
            CliError::Diverged { t, component, dir } => write!(
                f,
                "simulation diverged at t = {t} in {component}; partial log written to {}",
                dir.display()
            ),
            CliError::Io(e) | CliError::Failed(e) => write!(f, "{e}"),
        }
    }
}

/// Reads, overrides, validates and builds a scenario file.
pub fn load(path: &Path, overrides: &[String]) -> Result<(ScenarioConfig, BuiltScenario), CliError> {
    let text = fs::read_to_string(path).map_err(|source| {
        CliError::Io(Error::Io {
            path: path.display().to_string(),
            source,
        })
    })?;
    let cfg = parse_config(&text, overrides).map_err(CliError::Invalid)?;
    let built = cfg.build().map_err(CliError::Invalid)?;
    Ok((cfg, built))
}

/// Output directory by precedence: flag, environment, config.
pub fn resolve_out_dir(flag: Option<&Path>, config_dir: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(config_dir),
    }
}

pub struct ValidateSummary {
    pub warnings: Vec<String>,
    pub n_neurons: usize,
    pub regressor_radius: f64,
}

pub fn cmd_validate(args: &ConfigArgs) -> Result<ValidateSummary, CliError> {
    let (_, b) = load(&args.config, &args.overrides)?;
    Ok(ValidateSummary {
        warnings: b.warnings,
        n_neurons: b.scenario.grid.n_neurons(),
        regressor_radius: b.scenario.regressor_radius,
    })
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: usize,
    pub warnings: Vec<String>,
}

pub fn cmd_run(args: &ConfigArgs, out: Option<&Path>) -> Result<RunSummary, CliError> {
    let (cfg, b) = load(&args.config, &args.overrides)?;
    let dir = resolve_out_dir(out, &cfg.output.dir);
    let log = run_scenario(&b.scenario, &b.run)?;
    io::write_run(&dir, &cfg, &log)?;
    if let Some(d) = log.divergence {
        return Err(CliError::Diverged {
            t: d.t,
            component: d.component,
            dir,
        });
    }
    Ok(RunSummary {
        dir,
        rows: log.n_rows(),
        warnings: b.warnings,
    })
}

pub struct AnalyzeSummary {
    pub dir: PathBuf,
    pub report: io::ReportFile,
}

pub fn cmd_analyze(
    run_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
    out: Option<&Path>,
) -> Result<AnalyzeSummary, CliError> {
    let (meta, log) = io::read_run(run_dir)?;
    let cfg = match config {
        Some(p) => load(p, overrides)?.0,
        None if overrides.is_empty() => meta.config.clone(),
        None => {
            let text = toml::to_string(&meta.config)
                .map_err(|e| CliError::Failed(Error::Log(format!("cannot re-serialize the recorded scenario: {e}"))))?;
            parse_config(&text, overrides).map_err(CliError::Invalid)?
        }
    };
    let b = cfg.build().map_err(CliError::Invalid)?;
    if b.scenario.layout() != log.layout {
        return Err(CliError::Failed(Error::Log(
            "the scenario's state layout differs from the recorded run".into(),
        )));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.to_path_buf());
    fs::create_dir_all(&dir).map_err(|source| {
        CliError::Io(Error::Io {
            path: dir.display().to_string(),
            source,
        })
    })?;
    let (report, empty_windows) = match analyze(&log, &b.scenario, &b.analysis) {
        Ok(r) => (Some(r), None),
        Err(e @ Error::EmptyWindow { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    if let Some(r) = &report {
        io::write_metrics_csv(&dir.join(io::METRICS_FILE), r)?;
    }
    let file = io::ReportFile {
        schema_version: io::REPORT_SCHEMA_VERSION,
        code_version: io::code_version(),
        run_dir: run_dir.to_path_buf(),
        empty_windows,
        report,
    };
    io::write_json(&dir.join(io::REPORT_FILE), &file)?;
    Ok(AnalyzeSummary { dir, report: file })
}

/// Runs a parsed command line, printing to stdout/stderr, and returns the exit code.
pub fn execute(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(&args).map(|s| {
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "ok: {} neurons, regressor radius {:.3}",
                s.n_neurons, s.regressor_radius
            );
        }),
        Command::Run { config, out } => cmd_run(&config, out.as_deref()).map(|s| {
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} rows to {}", s.rows, s.dir.display());
        }),
        Command::Analyze {
            run_dir,
            config,
            overrides,
            out,
        } => cmd_analyze(&run_dir, config.as_deref(), &overrides, out.as_deref()).map(|s| {
            match (&s.report.report, &s.report.empty_windows) {
                (Some(r), _) => {
                    for v in &r.verdicts {
                        println!(
                            "criterion {} {}: {} ({})",
                            v.id,
                            if v.pass { "PASS" } else { "FAIL" },
                            v.name,
                            v.detail
                        );
                    }
                }
                (None, Some(why)) => println!("no metrics: {why}"),
                (None, None) => {}
            }
            println!("report written to {}", s.dir.display());
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
