mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Dataset {
        path: String,
        source: dpot::io::DatasetError,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: String,
        source: dpot::io::CheckpointError,
    },
    #[error(transparent)]
    Generate(#[from] dpot::pde::GenerateError),
    #[error(transparent)]
    Data(#[from] dpot::data::DataError),
    #[error(transparent)]
    Model(#[from] dpot::model::ModelError),
    #[error(transparent)]
    Train(#[from] dpot::train::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} checks failed")]
    Verify { failed: usize, total: usize },
}

#[derive(Debug, Parser)]
#[command(
    name = "dpot",
    version,
    about = "Fourier-attention PDE operator: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a PDE family from random initial conditions and write a dataset.
    Generate(GenerateArgs),
    /// Train a model from scratch on one or more datasets.
    Pretrain(TrainArgs),
    /// Initialize from a checkpoint and continue training on new data.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset and write per-step errors as CSV.
    Evaluate(EvaluateArgs),
    /// Roll a checkpoint forward from one trajectory and write the frames.
    Rollout(RolloutArgs),
    /// Train or evaluate along one hyperparameter axis.
    Ablate(AblateArgs),
    /// Run the invariant suite and print PASS/FAIL per check.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Solver settings (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in settings for an equation family instead of a spec file.
    #[arg(long, value_enum)]
    preset: Option<Family>,
    /// Grid size for `--preset`.
    #[arg(long, default_value_t = 32, requires = "preset")]
    resolution: usize,
    /// Number of trajectories (overrides the spec file).
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Heat,
    NsVorticity,
    DiffusionReaction,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Comma-separated dataset files.
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Sampling weight per dataset.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    /// Training settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Source checkpoint directory.
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    train: FinetuneTrain,
}

#[derive(Debug, Args)]
struct FinetuneTrain {
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "finetuned")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Onestep,
    Rollout,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridMode {
    /// Resample patch kernels to the new grid.
    Kernel,
    /// Resample the fields to the native grid and back.
    Signal,
}

impl From<GridMode> for dpot::model::ResolutionMode {
    fn from(m: GridMode) -> Self {
        match m {
            GridMode::Kernel => Self::Kernel,
            GridMode::Signal => Self::Signal,
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Rollout)]
    mode: EvalMode,
    /// Rollout length.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Windows per trajectory for one-step errors (all by default).
    #[arg(long)]
    windows: Option<usize>,
    /// How to run at a grid other than the training grid.
    #[arg(long, value_enum, default_value_t = GridMode::Kernel)]
    grid_mode: GridMode,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trajectory index.
    #[arg(long, default_value_t = 0)]
    traj: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = GridMode::Kernel)]
    grid_mode: GridMode,
    /// Output dataset holding the context frames followed by the predictions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_parser = ["heads", "patch", "noise", "resolution"])]
    kind: String,
    /// Grid values along the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    /// Held-out dataset files.
    #[arg(long, value_delimiter = ',', required = true)]
    eval: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridMode::Kernel)]
    grid_mode: GridMode,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Run only checks whose names contain one of these.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
