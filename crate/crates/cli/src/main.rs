//! Batch workflow CLI for heteroskedastic emulation and sensitivity
//! analysis of stochastic simulators.

mod config;
mod svg;
mod workflow;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::load_config;
use workflow::OutDir;

#[derive(Parser)]
#[command(
    name = "hetsa",
    about = "Heteroskedastic GP emulation, sequential design, and Sobol' sensitivity analysis",
    version
)]
struct Cli {
    /// Path to the workflow config (TOML).
    #[arg(long, global = true, default_value = "hetsa.toml")]
    config: PathBuf,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing artifacts / take over a stale lock.
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the initial Latin-hypercube design as pending ledger rows.
    Design,
    /// Evaluate pending rows, then run the sequential-design batches.
    Run,
    /// Fit the joint heteroskedastic emulator to the ledger.
    Fit,
    /// Score the emulator on a held-out test set.
    Validate,
    /// Sobol' indices with bootstrap intervals.
    Sa,
    /// Render figures and the markdown summary.
    Report,
    /// The whole pipeline: design, run, fit, validate, sa, report.
    All,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().ok();
    }

    let loaded = load_config(&cli.config, cli.seed)?;
    let out = OutDir::open(&cli.out, cli.force)?;

    match cli.command {
        Command::Design => workflow::cmd_design(&loaded, &out, cli.force),
        Command::Run => workflow::cmd_run(&loaded, &out, None),
        Command::Fit => workflow::cmd_fit(&loaded, &out).map(|_| ()),
        Command::Validate => workflow::cmd_validate(&loaded, &out).map(|_| ()),
        Command::Sa => workflow::cmd_sa(&loaded, &out).map(|_| ()),
        Command::Report => workflow::cmd_report(&loaded, &out),
        Command::All => workflow::cmd_all(&loaded, &out, cli.force),
    }
}
