mod commands;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Weighting estimators for causal effects under clustered interference.
#[derive(Debug, Parser)]
#[command(name = "clusterbal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit estimators with confidence intervals.
    Estimate(EstimateArgs),
    /// Covariate imbalance of the balancing weights.
    BalanceReport(BalanceArgs),
    /// Choose among nested candidate structures.
    Select(SelectArgs),
    /// Monte-Carlo study over a preset or configured design.
    Simulate(SimulateArgs),
    /// Signal scale for a target signal-to-noise ratio.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file (CSV or JSON).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset format; inferred from the extension by default.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Counterfactual weight as JSON text or a path to a JSON file.
    #[arg(long)]
    pub policy: String,
    /// Directory for the artifacts.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Structure spec (JSON text or file); required by balancing, projection and wproj.
    #[arg(long)]
    pub structure: Option<String>,
    /// Propensity model (JSON text or file), or `unknown`.
    #[arg(long, default_value = "unknown")]
    pub propensity: String,
    /// Estimators to fit, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "balancing")]
    pub estimator: Vec<String>,
    /// Exposure mapping (JSON) for the exposure-ipw estimator.
    #[arg(long)]
    pub exposure: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Report an infeasible balancing fit instead of exiting with code 2.
    #[arg(long)]
    pub allow_infeasible: bool,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Covariate tensor structure (JSON text or file).
    #[arg(long)]
    pub structure: String,
    /// Relative imbalance above which a cell is flagged.
    #[arg(long, default_value_t = 0.10)]
    pub threshold: f64,
    /// Scale cells by the policy-weighted pattern sum instead of the unweighted one.
    #[arg(long)]
    pub policy_scale: bool,
    #[arg(long)]
    pub allow_infeasible: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON array of structure specs ordered from most to least restrictive.
    #[arg(long)]
    pub candidates: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Named design with its sweep.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Design configuration (JSON text or file).
    #[arg(long)]
    pub config: Option<String>,
    /// Overrides the configured seed; drawn from entropy when neither is given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "ipw,balancing,projection")]
    pub estimator: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Sweep axis (n, kappa or snr); replaces the preset's sweep.
    #[arg(long, requires = "values")]
    pub axis: Option<String>,
    /// Comma-separated values along the sweep axis.
    #[arg(long, value_delimiter = ',', requires = "axis")]
    pub values: Option<Vec<f64>>,
    /// Run replicates one after another.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Target signal-to-noise ratio; defaults to the configured one.
    #[arg(long)]
    pub snr: Option<f64>,
}

/// Failure with its exit code: 1 for errors, 2 for statistical infeasibility.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const INFEASIBLE: u8 = 2;

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn infeasible(message: impl Into<String>) -> Self {
        Self {
            code: Self::INFEASIBLE,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::failure(format!("{}: {e}", path.display()))
    }
}

impl From<clusterbal::Error> for CliError {
    fn from(e: clusterbal::Error) -> Self {
        match e {
            clusterbal::Error::InfeasibleFit(_) => Self::infeasible(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Estimate(a) => commands::estimate(&a),
        Command::BalanceReport(a) => commands::balance_report(&a),
        Command::Select(a) => commands::select(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
