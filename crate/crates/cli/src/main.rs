use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdsgd_cli::{execute, Kind, RunOptions};

/// Online SGD for single-index models and its ODE/SDE scaling limits.
#[derive(Parser)]
#[command(name = "hdsgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hermite coefficients and information exponent of the activation.
    Hermite(Flags),
    /// Deterministic limit ODE for (m, r2).
    Ode(Flags),
    /// Euler-Maruyama ensemble of the rescaled-correlation SDE.
    Sde(Flags),
    /// Seeded SGD ensemble at one dimension N.
    Sgd(Flags),
    /// SGD ensemble means against the ODE, for each N in n_list.
    Compare(Flags),
    /// Radial fixed point, OU parameters and volatility variants.
    FixedPoint(Flags),
    /// SGD started at the fixed point against the predicted Gaussian law.
    OuCheck(Flags),
    /// Moment-scaling diagnostics of the gradient noise.
    Diagnose(Flags),
}

#[derive(Args)]
struct Flags {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for ensembles.
    #[arg(long)]
    threads: Option<usize>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
}

impl From<Flags> for RunOptions {
    fn from(f: Flags) -> Self {
        Self {
            config: f.config,
            out: f.out,
            threads: f.threads,
            seed: f.seed,
            svg: f.svg,
        }
    }
}

fn main() -> ExitCode {
    let (kind, flags) = match Cli::parse().command {
        Command::Hermite(f) => (Kind::Hermite, f),
        Command::Ode(f) => (Kind::Ode, f),
        Command::Sde(f) => (Kind::Sde, f),
        Command::Sgd(f) => (Kind::Sgd, f),
        Command::Compare(f) => (Kind::Compare, f),
        Command::FixedPoint(f) => (Kind::FixedPoint, f),
        Command::OuCheck(f) => (Kind::OuCheck, f),
        Command::Diagnose(f) => (Kind::Diagnose, f),
    };
    match execute(kind, &flags.into()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
