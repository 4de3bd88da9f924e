//! `covadj`: covariate-adjusted treatment means from the command line.
//!
//! Exit status: 0 success, 2 input or validation error, 3 non-convergence,
//! 4 singular system. Failures print one `covadj: error[<kind>]: <message>`
//! line on stderr.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "covadj",
    version,
    about = "Covariate-adjusted treatment means for designed experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter estimates and log-likelihood.
    Fit(ModelRun),
    /// Adjusted treatment means (or effects) with standard errors.
    Adjust(ModelRun),
    /// A treatment contrast with its standard error.
    Contrast(ContrastRun),
    /// Fixed, mixed and bivariate adjusted means side by side.
    Compare(CompareRun),
    /// Validate the recipe's stratum partition and its conformance to the data.
    CheckDesign(CheckRun),
    /// Monte Carlo bias study of the slope and adjusted-mean estimators.
    Simulate(SimulateRun),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Fixed,
    Mixed,
    Bivariate,
    Orthogonal,
    Mvc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Json,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Delimited data file (comma or tab separated, header row).
    #[arg(long)]
    pub data: PathBuf,
    /// Design file (TOML).
    #[arg(long)]
    pub design: PathBuf,
}

#[derive(Debug, Args)]
pub struct Outputs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct Fitting {
    #[arg(long, value_enum, default_value = "mvc")]
    pub model: Model,
    #[arg(long, value_enum, default_value = "ml")]
    pub method: MethodArg,
    /// Convergence tolerance on the log-likelihood.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration limit.
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelRun {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub fitting: Fitting,
    #[command(flatten)]
    pub outputs: Outputs,
}

#[derive(Debug, Args)]
pub struct ContrastRun {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub fitting: Fitting,
    /// Contrast declared in the design file's `[contrasts]` table.
    #[arg(long, conflicts_with = "coef")]
    pub contrast: Option<String>,
    /// Inline coefficients, e.g. `A=1,B=-1`.
    #[arg(long)]
    pub coef: Option<String>,
    #[command(flatten)]
    pub outputs: Outputs,
}

#[derive(Debug, Args)]
pub struct CompareRun {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Variance-component method of the univariate mixed model.
    #[arg(long, value_enum, default_value = "ml")]
    pub method: MethodArg,
    #[command(flatten)]
    pub outputs: Outputs,
}

#[derive(Debug, Args)]
pub struct CheckRun {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Tolerance of the partition checks.
    #[arg(long, default_value_t = covadj::design::DEFAULT_PARTITION_TOL)]
    pub tol: f64,
    #[command(flatten)]
    pub outputs: Outputs,
}

#[derive(Debug, Args)]
pub struct SimulateRun {
    /// Number of treatments.
    #[arg(long, default_value_t = 6)]
    pub treatments: usize,
    /// Number of blocks.
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 2000)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Block covariance of (response, covariate) as `var_y,cov,var_z`.
    #[arg(long, default_value = "4,2,1")]
    pub sigma_b: String,
    /// Plot covariance of (response, covariate) as `var_y,cov,var_z`.
    #[arg(long, default_value = "1,0.5,1")]
    pub sigma_e: String,
    /// Response treatment means, comma separated; zero when omitted.
    #[arg(long)]
    pub mu_y: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub mu_z: f64,
    /// Also write the simulated replicates as long-format CSV to this path.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    #[command(flatten)]
    pub outputs: Outputs,
}

/// Failure with its exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "input",
            message: message.into(),
        }
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "convergence",
            message: message.into(),
        }
    }
}

impl From<covadj::Error> for CliError {
    fn from(e: covadj::Error) -> Self {
        use covadj::Error as E;
        let (code, kind) = match &e {
            E::Singular(_) | E::SingularStratum { .. } | E::RankDeficient { .. } => (4, "singular"),
            E::Inestimable(_) => (2, "inestimable"),
            E::Design(_) => (2, "design"),
            E::Io(_) => (2, "io"),
            _ => (2, "input"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message.replace('\n', " ");
            eprintln!("covadj: error[{}]: {message}", e.kind);
            ExitCode::from(e.code)
        }
    }
}
