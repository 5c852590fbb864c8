//! `paconv`: checks, cost tables, training runs and score-field dumps.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage error, 3 runtime or
//! parse error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paconv::autograd::LossKind;
use paconv::geometry::RelationMode;
use paconv::paconv::{AggMode, ExecPath, NormMode};
use paconv::scorefield::Plane;
use paconv::Precision;

#[derive(Debug, Parser)]
#[command(name = "paconv", version, about = "Position-adaptive point convolution toolkit")]
pub struct Cli {
    /// TOML or JSON config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Arithmetic precision: single or double.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for the output artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare the naive and fused paths on random instances.
    Equivalence(EquivalenceArgs),
    /// Closed-form multiply-add and buffer counts for both paths.
    Flops(FlopsArgs),
    /// Evaluate a ScoreNet over a grid of neighbor offsets.
    Scorefield(ScorefieldArgs),
    /// Finite-difference check of the hand-derived gradients.
    Gradcheck(GradcheckArgs),
    /// Train the toy classifier on synthetic shapes.
    Train(TrainArgs),
    /// Accuracy of a saved model, optionally under one transform.
    Evaluate(EvaluateArgs),
    /// Accuracy under the perturbation suite.
    Robustness(RobustnessArgs),
    /// Minimize the bank correlation penalty alone and track Pearson R.
    CorrStudy(CorrStudyArgs),
}

#[derive(Debug, Args)]
pub struct EquivalenceArgs {
    /// Number of random instances.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub tol_single: Option<f64>,
    #[arg(long)]
    pub tol_double: Option<f64>,
    #[arg(long)]
    pub tol_backward: Option<f64>,
    /// Corrupt one fused intermediate; the check must then fail.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub c_in: Option<usize>,
    #[arg(long)]
    pub c_out: Option<usize>,
    /// ScoreNet hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub relation: Option<RelationMode>,
    /// Bank sizes to tabulate, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub m_sweep: Option<Vec<usize>>,
    /// Also run instrumented forwards and require exact agreement.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct ScorefieldArgs {
    /// Layer file (JSON or binary) or model JSON.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Layer index when `--params` is a model.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Planes to sample, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub plane: Option<Vec<Plane>>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub extent: Option<f64>,
    /// Fixed center as `x,y,z`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub center: Option<Vec<f64>>,
    /// Fail unless two surfaces differ by more than this somewhere.
    #[arg(long)]
    pub require_gap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub c_in: Option<usize>,
    #[arg(long)]
    pub c_out: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub agg: Option<Vec<AggMode>>,
    #[arg(long, value_delimiter = ',')]
    pub norm: Option<Vec<NormMode>>,
    #[arg(long, value_delimiter = ',')]
    pub path: Option<Vec<ExecPath>>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the correlation penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Stop early once train accuracy reaches this.
    #[arg(long)]
    pub target_acc: Option<f64>,
    /// Fail unless final train accuracy reaches this.
    #[arg(long)]
    pub require_acc: Option<f64>,
    /// Run the samples of each batch on the thread pool.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Transform spec, e.g. `rotate_z:90` or `jitter:0.02`.
    #[arg(long)]
    pub transform: Option<String>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    /// Model JSON; without one the `train` section is run first.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Transform specs; repeat or comma separate. Defaults to the full suite.
    #[arg(long, value_delimiter = ',')]
    pub transform: Option<Vec<String>>,
    /// Largest tolerated jitter accuracy drop.
    #[arg(long)]
    pub jitter_tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CorrStudyArgs {
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub c_in: Option<usize>,
    #[arg(long)]
    pub c_out: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fail unless the final mean |R| is below this.
    #[arg(long)]
    pub require_mean_abs_r: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A check ran and did not hold.
    Check(String),
    Core(paconv::Error),
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        use paconv::Error as E;
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(E::Size(_) | E::Input(_) | E::Precision { .. }) => 2,
            CliError::Core(_) | CliError::Io { .. } => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl From<paconv::Error> for CliError {
    fn from(e: paconv::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("paconv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
