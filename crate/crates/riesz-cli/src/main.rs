//! Command line front end: scenario configs, data ingestion, and the
//! influence / check / bias-order / mc / bound / audit runs with a stable
//! exit-code contract (0 success, 2 configuration, 3 precondition, 4
//! internal).

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, CliResult};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "riesz",
    version,
    about = "Influence-function calculus for moment-condition models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the analytic influence table of a scenario
    Influence(CommonArgs),
    /// Run the robustness/efficiency decision criteria on a system
    Check(CommonArgs),
    /// Fit the drift orders of raw and corrected identifications
    BiasOrder(CommonArgs),
    /// Monte Carlo comparison of estimators against the influence table
    Mc(CommonArgs),
    /// Efficiency bounds of a system
    Bound(CommonArgs),
    /// Check and oracle-verify a system on ingested observations
    Audit(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Built-in scenario name
    #[arg(long)]
    scenario: Option<String>,
    /// Configuration file (TOML); flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the report and exports
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (required for mc)
    #[arg(long)]
    seed: Option<u64>,
    /// Verdict tolerance override where meaningful
    #[arg(long)]
    tol: Option<f64>,
    /// Report format: json or csv
    #[arg(long)]
    format: Option<String>,
    /// Worker threads for parallel sections
    #[arg(long)]
    jobs: Option<usize>,
    /// Quantile level, for the quantile scenario
    #[arg(long)]
    q: Option<f64>,
}

fn resolve(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_path(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &args.scenario {
        cfg.scenario = Some(s.clone());
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(tol) = args.tol {
        cfg.tol = Some(tol);
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.display().to_string());
    }
    if let Some(fmt) = &args.format {
        if fmt != "json" && fmt != "csv" {
            return Err(CliError::Config(format!("unknown format '{fmt}'")));
        }
        cfg.format = Some(fmt.clone());
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(q) = args.q {
        cfg.quantile = Some(config::QuantileSection {
            q,
            grid_points: cfg.quantile.as_ref().and_then(|s| s.grid_points),
        });
        if cfg.scenario.is_none() {
            cfg.scenario = Some("quantile".into());
        }
    }
    Ok(cfg)
}

fn run(command: &Command) -> CliResult<()> {
    let cfg = match command {
        Command::Influence(a)
        | Command::Check(a)
        | Command::BiasOrder(a)
        | Command::Mc(a)
        | Command::Bound(a)
        | Command::Audit(a) => resolve(a)?,
    };
    if let Some(jobs) = cfg.jobs {
        if jobs > 0 {
            // ignore failure: the pool can only be sized once per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        }
    }
    match command {
        Command::Influence(_) => commands::cmd_influence(&cfg),
        Command::Check(_) => commands::cmd_check(&cfg),
        Command::BiasOrder(_) => commands::cmd_bias_order(&cfg),
        Command::Mc(_) => commands::cmd_mc(&cfg),
        Command::Bound(_) => commands::cmd_bound(&cfg),
        Command::Audit(_) => commands::cmd_audit(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
