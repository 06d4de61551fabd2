mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;

/// Fairness audits for ranked candidate lists.
#[derive(Debug, Parser)]
#[command(name = "rankaudit", version)]
pub struct Cli {
    /// TOML file supplying defaults for any option below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output format for tabular results (default csv).
    #[arg(long, global = true)]
    pub format: Option<Format>,
    /// Write the main output here instead of stdout.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Protected attribute name (default gender).
    #[arg(long, global = true)]
    pub attribute: Option<String>,
    /// Comma-separated group labels (default F,M).
    #[arg(long, global = true, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Label for unresolved candidates (default unknown).
    #[arg(long, global = true)]
    pub unknown_label: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pairs {
    FromFirst,
    Consecutive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Key {
    First,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Post {
    None,
    Detgreedy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a snapshot file and report parse errors, quarantined snapshots and missing rates.
    Validate { data: PathBuf },
    /// Infer group labels from names and write the labeled snapshot file.
    Label(LabelArgs),
    /// Deviation, skew, corrected skew and MinSkew curves per snapshot.
    Audit(AuditArgs),
    /// Per-group churn between days.
    Churn(ChurnArgs),
    /// Rerank a scored pool with DetGreedy.
    Rerank(RerankArgs),
    /// Mixed-model testing protocols.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Generate a synthetic snapshot file with a ground-truth ledger.
    Simulate(SimulateArgs),
    /// Heatmap matrix (rows = queries or day pairs, columns = cutoffs).
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Page size for the default grid of page boundaries (default 25).
    #[arg(long)]
    pub page: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Drop queries whose first snapshot has a larger missing rate.
    #[arg(long)]
    pub max_missing_rate: Option<f64>,
    /// Drop queries whose first snapshot has a smaller pool.
    #[arg(long)]
    pub min_pool: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    pub data: PathBuf,
    /// Name frequency table (`name,label,count`); repeat for a fallback chain.
    #[arg(long = "table")]
    pub tables: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub key: Option<Key>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    pub data: PathBuf,
    /// Comma-separated cutoffs (default every position).
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// External baseline CSV `query_id,attribute,label,share`; default is the observed pool.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[command(flatten)]
    pub filter: FilterArgs,
}

#[derive(Debug, Args)]
pub struct ChurnArgs {
    pub data: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, value_enum)]
    pub pairs: Option<Pairs>,
    #[command(flatten)]
    pub filter: FilterArgs,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// CSV `candidate_id,label,score`.
    pub pool: PathBuf,
    /// `observed` or `LABEL=SHARE,...`.
    #[arg(long, default_value = "observed")]
    pub targets: String,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Test mean MinSkew against a null value at each cutoff.
    MinskewProtocol(MinskewArgs),
    /// Regress churn on group and day at each cutoff.
    ChurnProtocol(ChurnArgs),
}

#[derive(Debug, Args)]
pub struct MinskewArgs {
    pub data: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Null value for mean MinSkew (default -0.011).
    #[arg(long, allow_hyphen_values = true)]
    pub null: Option<f64>,
    #[command(flatten)]
    pub filter: FilterArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub pool_min: Option<usize>,
    #[arg(long)]
    pub pool_max: Option<usize>,
    /// Base true shares, one per label.
    #[arg(long, value_delimiter = ',')]
    pub shares: Option<Vec<f64>>,
    #[arg(long)]
    pub share_jitter: Option<f64>,
    /// Daily departure probability, one per label.
    #[arg(long, value_delimiter = ',')]
    pub departure: Option<Vec<f64>>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub postprocess: Option<Post>,
    /// Attach synthetic first names.
    #[arg(long)]
    pub names: bool,
    /// Ground-truth ledger (JSONL).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Name table matching the synthetic names.
    #[arg(long)]
    pub name_table: Option<PathBuf>,
    /// Demote this label from the top positions.
    #[arg(long)]
    pub bias_label: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub bias_strength: f64,
    #[arg(long, default_value_t = 25)]
    pub bias_depth: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub data: PathBuf,
    /// deviation, skew, corrected_skew, minskew or churn.
    #[arg(long)]
    pub metric: String,
    /// Group label; required for every metric except minskew.
    #[arg(long)]
    pub label: Option<String>,
    /// Only this day's snapshots (curve metrics).
    #[arg(long)]
    pub day: Option<u32>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub pairs: Option<Pairs>,
    #[command(flatten)]
    pub filter: FilterArgs,
}

/// Exit codes: 0 clean, 1 error, 2 finished but input snapshots were rejected.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let config = match cli.config.as_deref().map(Config::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli, &config) {
        Ok(commands::Outcome::Clean) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Quarantined) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
