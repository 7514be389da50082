//! Batch front end for fitting, poststratifying, benchmarking and
//! validating small-area displacement models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input (including
//! unreadable input files and bad command-line arguments).

pub mod commands;
pub mod config;
pub mod manifest;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sae_core::model::Variant;

#[derive(Debug, Parser)]
#[command(name = "sae", version, about = "Small-area estimation of residential displacement rates")]
pub struct Cli {
    /// Master random seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving all outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to mover records and write the posterior draw archive.
    Fit(FitArgs),
    /// Poststratify a draw archive and optionally benchmark the estimates.
    Estimate(EstimateArgs),
    /// Leave-one-area-out cross-validation of the model variants.
    Validate(ValidateArgs),
    /// Write a synthetic dataset drawn from the configured scenario.
    Simulate,
    /// Direct survey estimate with replicate-weight standard error.
    Direct(DirectArgs),
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Area list (geography_version, puma).
    #[arg(long)]
    pub nodes: Option<PathBuf>,
    /// Area adjacency (geography_version, puma_a, puma_b).
    #[arg(long, requires = "nodes")]
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub movers: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Model variant (overrides the config file).
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Directory holding draws.bin and draws_meta.json.
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub poststrat: PathBuf,
    /// Aggregate targets (cohort, estimate, std_error).
    #[arg(long)]
    pub benchmarks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub movers: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Debug, Args)]
pub struct DirectArgs {
    /// Household rows with displaced, weight and rep_weight_1..K columns.
    #[arg(long)]
    pub replicates: PathBuf,
    /// Cohort of every row when the file has no cohort column.
    #[arg(long)]
    pub cohort: Option<u8>,
}
