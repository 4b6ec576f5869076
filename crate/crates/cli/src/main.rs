//! `vlcache`: one binary driving the whole pipeline.
//!
//! Failures print a single JSON line on stderr, `{"error":<kind>,"code":<n>,"message":...}`,
//! and exit with the code listed in [`exit_code`].

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use vlcache_core::Error;

use crate::commands::Budget;
use crate::config::GlobalConfig;

#[derive(Parser)]
#[command(name = "vlcache", version, about = "Vision-token KV cache reuse on a toy VLM")]
struct Cli {
    /// Pipeline config (TOML). The store directory can be overridden with VLCACHE_STORE_DIR.
    #[arg(long, global = true, default_value = "vlcache.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the model from its config and seed, and write the weights.
    Init,
    /// Cache-miss prefills over the dataset; the only command that writes the store.
    Fill,
    /// Measure per-layer sensitivity and write the table.
    Profile {
        /// Comma-separated ratio grid, e.g. 0.1,0.2,0.3.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Allocate a recompute budget over a sensitivity table.
    #[command(group(ArgGroup::new("budget").required(true).args(["p_target", "mean_ratio"])))]
    Plan {
        #[arg(long)]
        table: Option<PathBuf>,
        /// Total budget, summed over layers.
        #[arg(long)]
        p_target: Option<f64>,
        /// Target mean ratio; the budget is this times the layer count.
        #[arg(long)]
        mean_ratio: Option<f64>,
        /// Budget grid; defaults to the table's grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reuse prefill plus greedy decode of the configured request.
    Run {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefill latency and FLOPs over the configured scenario matrix.
    Bench {
        /// Plan file for the `dynamic` configuration.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// CSV path; the text table goes next to it with a .txt extension.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also measure throughput with this many concurrent requests.
        #[arg(long, default_value_t = 0)]
        concurrency: usize,
    },
    /// Reuse-error experiments, written as CSV.
    Error {
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Stable kind names and exit codes. Clap usage errors exit with 2.
fn exit_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::Parse { .. } => ("config", 3),
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("missing_file", 4),
        Error::InvalidPlan(_) => ("invalid_plan", 5),
        Error::StaleCache { .. } => ("fingerprint_mismatch", 6),
        Error::Integrity { .. } => ("integrity", 7),
        Error::Setup(_) => ("setup", 8),
        Error::Input(_) | Error::Shape(_) | Error::Size(_) => ("input", 9),
        Error::Io { .. } => ("io", 10),
    }
}

fn dispatch(cli: Cli) -> vlcache_core::Result<()> {
    let gc = GlobalConfig::load(&cli.config)?;
    match cli.command {
        Command::Init => commands::init(&gc),
        Command::Fill => commands::fill(&gc),
        Command::Profile { grid, out } => commands::profile(&gc, grid, out),
        Command::Plan {
            table,
            p_target,
            mean_ratio,
            grid,
            out,
        } => {
            let budget = match (p_target, mean_ratio) {
                (Some(p), _) => Budget::Total(p),
                (None, Some(r)) => Budget::Mean(r),
                (None, None) => unreachable!("clap requires one budget flag"),
            };
            commands::plan(&gc, table, budget, grid, out)
        }
        Command::Run { plan, out } => commands::run(&gc, plan, out),
        Command::Bench { plan, out, concurrency } => commands::bench(&gc, plan, out, concurrency),
        Command::Error { out } => commands::error(&gc, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = exit_code(&e);
            let line = serde_json::json!({ "error": kind, "code": code, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
