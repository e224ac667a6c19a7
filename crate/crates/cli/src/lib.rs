//! Experiment runner for online SGD on single-index models: config
//! handling, subcommands, and CSV/SVG output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Kind, Resolved};
pub use error::{CliError, CliResult};
pub use output::OutputDir;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub svg: bool,
}

/// Loads and validates the config, writes the manifest, then runs `kind` on
/// a pool of the requested size.
pub fn execute(kind: Kind, opts: &RunOptions) -> CliResult<()> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &opts.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if opts.threads == Some(0) {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    let res = cfg.resolve(kind)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut out = OutputDir::create(&res.config.out, opts.svg)?;
    out.write_text("manifest.toml", &res.manifest()?)?;
    pool.install(|| commands::run(&res, &mut out))
}
