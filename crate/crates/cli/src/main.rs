//! `panelcf` command-line runner.
//!
//! Every run writes into one output directory: `report.json`, CSV tables,
//! SVG figures where they make sense, and a `run.json` manifest. Failures
//! print a single `panelcf: error ...` line on stderr and exit with 1
//! (configuration), 2 (data) or 3 (numerical).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panelcf::ErrorKind;
use serde_json::json;

use config::{file_sha256, Overrides, RunConfig};
use output::{DirLock, Outputs};

#[derive(Parser, Debug)]
#[command(
    name = "panelcf",
    version,
    about = "Control-function panel estimation, event studies, survival curves and dynamic GMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args, Debug)]
struct Flags {
    /// Input CSV (a panel, or `duration,event,group` rows for `survival`).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bootstrap (cf-poisson) or Monte Carlo replications.
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Keep years FROM through TO.
    #[arg(long, global = true, value_name = "FROM:TO")]
    window: Option<String>,
    /// Collapse the GMM-style instrument blocks.
    #[arg(long, global = true)]
    collapse_instruments: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Within regression of the endogenous variable on the instruments.
    FirstStage,
    /// Control-function FE Poisson with the endogeneity test.
    CfPoisson,
    /// Abnormal values around events.
    EventStudy,
    /// Kaplan-Meier curves by group.
    Survival,
    /// System GMM for a dynamic panel.
    Gmm,
    /// Write a synthetic panel.
    Simulate,
    /// Repeated simulation and estimation of the control-function model.
    MonteCarlo,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::FirstStage => "first-stage",
            Command::CfPoisson => "cf-poisson",
            Command::EventStudy => "event-study",
            Command::Survival => "survival",
            Command::Gmm => "gmm",
            Command::Simulate => "simulate",
            Command::MonteCarlo => "monte-carlo",
        }
    }
}

/// A failed run: exit code, stable reason and human detail.
#[derive(Debug)]
pub struct Failure {
    kind: ErrorKind,
    reason: String,
    detail: String,
}

impl Failure {
    pub fn config(reason: &str, detail: String) -> Failure {
        Failure {
            kind: ErrorKind::Config,
            reason: reason.into(),
            detail,
        }
    }

    pub fn data(reason: &str, detail: String) -> Failure {
        Failure {
            kind: ErrorKind::Data,
            reason: reason.into(),
            detail,
        }
    }

    fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }

    fn line(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        };
        format!(
            "panelcf: error code={} kind={kind} reason={} detail={}",
            self.code(),
            self.reason,
            serde_json::to_string(&self.detail).unwrap_or_default()
        )
    }
}

impl From<panelcf::Error> for Failure {
    fn from(e: panelcf::Error) -> Failure {
        let reason = match &e {
            panelcf::Error::UnknownColumn(c) => format!("unknown_column:{c}"),
            other => other.reason().to_string(),
        };
        Failure {
            kind: e.kind(),
            reason,
            detail: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let flags = Overrides {
        input: cli.flags.input.clone(),
        seed: cli.flags.seed,
        reps: cli.flags.reps,
        alpha: cli.flags.alpha,
        window: cli.flags.window.clone(),
        collapse_instruments: cli.flags.collapse_instruments,
    };
    let cfg = RunConfig::load(cli.flags.config.as_deref(), &flags)?;
    let dir = cli
        .flags
        .out
        .clone()
        .ok_or_else(|| Failure::config("missing_out", "--out is required".into()))?;
    if let Ok(n) = std::env::var("PANELCF_THREADS") {
        let n: usize = n.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            Failure::config(
                "invalid_threads",
                format!("PANELCF_THREADS must be a positive integer, got `{n}`"),
            )
        })?;
        panelcf::exec::set_threads(n);
    }

    let _lock = DirLock::acquire(&dir)?;
    let mut out = Outputs::new(&dir);
    match cli.command {
        Command::FirstStage => commands::first_stage(&cfg, &mut out)?,
        Command::CfPoisson => commands::cf_poisson(&cfg, &mut out)?,
        Command::EventStudy => commands::event_study(&cfg, &mut out)?,
        Command::Survival => commands::survival(&cfg, &mut out)?,
        Command::Gmm => commands::gmm(&cfg, &mut out)?,
        Command::Simulate => commands::simulate(&cfg, &mut out)?,
        Command::MonteCarlo => commands::monte_carlo_run(&cfg, &mut out)?,
    }
    let input = match &cfg.input {
        Some(p) if p.is_file() => json!({ "path": p, "sha256": file_sha256(p)? }),
        _ => serde_json::Value::Null,
    };
    let mut artifacts = out.artifacts.clone();
    artifacts.sort();
    out.json(
        "run.json",
        &json!({
            "tool": "panelcf",
            "version": panelcf::VERSION,
            "subcommand": cli.command.name(),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "parallel": panelcf::exec::parallel_available(),
            "config": cfg,
            "input": input,
            "artifacts": artifacts,
        }),
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::config("bad_arguments", e.to_string().lines().next().unwrap_or("").to_string());
            eprintln!("{}", f.line());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
