//! `cpca`: command-line front end for the Common PCA toolkit.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 solver did not converge,
//! 3 gradient check failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cpca", version, about = "Common principal components: Flury-Gautschi and deep-unfolded solvers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML or JSON file with per-command sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress the human-readable summary on stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a common basis with the Flury-Gautschi algorithm.
    Fg(FgArgs),
    /// Run the unrolled Cayley solver with given or hypernet-at-zero step sizes.
    Unfold(UnfoldArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Generate a covariance ensemble or a toy domain-generalization dataset.
    Gen(GenArgs),
    /// Train CPCANet or the ERM baseline.
    Train(TrainArgs),
    /// Train CPCANet over a grid of projection dimensions and stage counts.
    Sweep(SweepArgs),
    /// Compare both solvers on one ensemble and run the subspace-classifier diagnostic.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct FgArgs {
    /// Covariance-set JSON (`{"d": .., "domains": [{"n": .., "S": [[..]]}]}`).
    pub covs: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HyperInit {
    /// η_t = 0.5·σ(0) = 0.25 at every stage.
    Zeros,
}

#[derive(Debug, Args)]
pub struct UnfoldArgs {
    pub covs: PathBuf,
    /// Comma-separated step sizes, one per stage, each in (0, 0.5).
    #[arg(long, conflicts_with = "hyper")]
    pub etas: Option<String>,
    #[arg(long, value_enum)]
    pub hyper: Option<HyperInit>,
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Primitive,
    Unfold,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    /// Strict for primitive and unfold, floored for full.
    Auto,
    Strict,
    Floored,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long, value_enum, default_value_t = MetricArg::Auto)]
    pub metric: MetricArg,
    /// Negative control: scales one matmul adjoint by 1.01.
    #[arg(long, hide = true)]
    pub inject_adjoint_fault: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(subcommand)]
    pub what: GenWhat,
}

#[derive(Debug, Subcommand)]
pub enum GenWhat {
    /// Covariances sharing a planted basis: writes covs.json and truth.json.
    Ensemble {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Multi-domain classification data: writes domain_<j>.csv and manifest.json.
    Toy {
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        strength: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    Cpcanet,
    Erm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = PipelineArg::Cpcanet)]
    pub pipeline: PipelineArg,
    /// Dataset manifest from `gen toy`; without it a toy set is generated from the seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda_cpca: Option<f64>,
    #[arg(long)]
    pub freeze_modulation: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated projection dimensions.
    #[arg(long)]
    pub dims: Option<String>,
    /// Comma-separated stage counts.
    #[arg(long)]
    pub stages: Option<String>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
}

/// Non-error outcomes that still map to a non-zero exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    NotConverged,
    GradcheckFailed,
}

impl Status {
    fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::NotConverged => 2,
            Status::GradcheckFailed => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
