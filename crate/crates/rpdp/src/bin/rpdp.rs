use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rpdp::commands::{cmd_curves, cmd_fit, cmd_run, CmdOptions};
use rpdp::config::ExperimentConfig;

/// Federated learning simulator with record-level personalized
/// differential privacy: budget curves, sampling-probability estimation,
/// and full training runs driven by a TOML config.
#[derive(Parser)]
#[command(name = "rpdp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Adversary the guarantee is stated against: server | client.
    #[arg(long)]
    threat: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump RDP/DP budget curves and the optimal ε*(q) sweep as CSV.
    Curves(Common),
    /// Simulate the ε*(q) grid and fit the sampling-probability estimator.
    Fit(Common),
    /// Train under every configured mode and seed; write metrics, ledgers,
    /// and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also time estimator-based assignment against per-budget binary
        /// search for 1,000 sampled budgets.
        #[arg(long)]
        compare_binary_search: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, compare) = match &cli.command {
        Command::Curves(c) | Command::Fit(c) => (c, false),
        Command::Run { common, compare_binary_search } => (common, *compare_binary_search),
    };

    let cfg = match ExperimentConfig::load(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let opts = CmdOptions {
        out_dir: common.out.clone(),
        seed: common.seed,
        threat: common.threat.clone(),
        compare_binary_search: compare,
    };

    let result = match &cli.command {
        Command::Curves(_) => cmd_curves(&cfg, &opts),
        Command::Fit(_) => cmd_fit(&cfg, &opts).map(|_| ()),
        Command::Run { .. } => cmd_run(&cfg, &opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
