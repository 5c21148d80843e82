mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nncgp::baselines::ModelKind;

/// Input or configuration problem the user can fix; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

#[derive(Parser)]
#[command(name = "nncgp", version, about = "Multi-fidelity nearest-neighbor co-kriging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw synthetic multi-fidelity data.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the MCMC sampler.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Posterior predictive summaries at targets or grid cell centers.
    Predict(PredictArgs),
    /// Score predictions against held-out data.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Fit directory; adds DIC and pD to the report.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare sparse computations with dense exact ones.
    OracleCheck {
        /// Comma-separated sizes of the exactness checks.
        #[arg(long, value_delimiter = ',', default_values_t = [20usize, 50, 200])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Corrupt one conditional variance; the suite must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Args)]
pub struct PredictArgs {
    /// Fit directory written by `fit`.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Run config whose `output` names the fit directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV of target coordinates.
    #[arg(long, conflicts_with = "grid")]
    targets: Option<PathBuf>,
    /// Grid bounds `lo1,hi1,lo2,hi2,...`.
    #[arg(long, value_delimiter = ',', requires = "cell", allow_hyphen_values = true)]
    grid: Option<Vec<f64>>,
    /// Cell size, one value for all coordinates or one per coordinate.
    #[arg(long, value_delimiter = ',')]
    cell: Option<Vec<f64>>,
    /// Fidelity level to predict (1-based); defaults to the highest.
    #[arg(long)]
    level: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV; defaults to `predictions.csv` in the fit directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Status 1 for user errors, 2 for internal failures.
fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<nncgp::Error>() {
            return if e.is_user_error() { 1 } else { 2 };
        }
    }
    2
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NNCGP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UserError(format!("NNCGP_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate { config, out, seed } => commands::simulate(&config, &out, seed),
        Command::Fit {
            config,
            out,
            seed,
            model,
        } => commands::fit(&config, out.as_deref(), seed, model),
        Command::Predict(args) => commands::predict(&args),
        Command::Evaluate { pred, test, fit, out } => commands::evaluate(&pred, &test, fit.as_deref(), out.as_deref()),
        Command::OracleCheck {
            sizes,
            seed,
            inject_fault,
        } => commands::oracle_check(sizes, seed, inject_fault),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
