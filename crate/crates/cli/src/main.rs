//! Batch command-line front end: scenario ingestion, solver orchestration,
//! CSV/JSON exports and the validation suite.
//!
//! Exit codes: 0 success, 2 configuration error, 3 fixed-point
//! nonconvergence, 4 shooting nonconvergence, 5 validation failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

mod commands;
mod manifest;
mod overrides;
mod validate;

#[derive(Parser)]
#[command(
    name = "mfg",
    version,
    about = "Solvers for first-order mean field games with degenerate triangular dynamics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output directory (default: $MFG_OUT_DIR, falling back to ./mfg-out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Name of a built-in scenario (see `mfg scenarios`)
    #[arg(long)]
    scenario: Option<String>,
    /// Path to a scenario TOML file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set numerics.dx=0.05 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the backward Hamilton-Jacobi equation for a frozen population
    SolveHjb(ScenarioArgs),
    /// Solve the full MFG system by damped fixed-point iteration
    SolveMfg(ScenarioArgs),
    /// Solve the Pontryagin boundary-value problem from one starting point
    Trajectory {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Starting point, comma separated, e.g. --x0 0.5,0.0
        #[arg(long)]
        x0: String,
        /// Starting time in [0, T)
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
    /// Push the initial density through the characteristic flow
    Pushforward(ScenarioArgs),
    /// Run the cross-module invariant battery
    Validate {
        /// Restrict to named scenarios (default: every built-in)
        #[arg(long)]
        scenario: Vec<String>,
    },
    /// List the built-in scenarios
    Scenarios,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore failure: the pool may already exist in tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let out_dir = cli
        .out
        .or_else(|| std::env::var_os("MFG_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mfg-out"));

    let status = match cli.cmd {
        Cmd::SolveHjb(args) => commands::solve_hjb(&args, &out_dir),
        Cmd::SolveMfg(args) => commands::solve_mfg(&args, &out_dir),
        Cmd::Trajectory { scenario, x0, t } => commands::trajectory(&scenario, &x0, t, &out_dir),
        Cmd::Pushforward(args) => commands::pushforward(&args, &out_dir),
        Cmd::Validate { scenario } => validate::run(&scenario, &out_dir),
        Cmd::Scenarios => commands::list_scenarios(&out_dir),
    };
    match status {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code);
        }
    }
}

/// A failure mapped onto the documented exit-code contract, emitted as
/// machine-readable JSON on the error stream.
pub struct CliError {
    pub exit_code: i32,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn config(kind: &str, message: impl Into<String>) -> CliError {
        CliError {
            exit_code: 2,
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn from_core(err: mfg_core::MfgError) -> CliError {
        use mfg_core::MfgError::*;
        let (exit_code, kind) = match &err {
            ShootingNonConvergence { .. } => (4, "shooting-nonconvergence"),
            Excursion { .. } => (2, "trajectory-excursion"),
            Config(_) | Expr(_) => (2, "config-invalid"),
            Io(_) => (2, "io"),
            _ => (2, "config-invalid"),
        };
        CliError {
            exit_code,
            kind: kind.into(),
            message: err.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error_kind": self.kind,
            "message": self.message,
        })
        .to_string()
    }
}
