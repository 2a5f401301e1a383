//! Auto-regressive denoising training, evaluation and ablation drivers.

mod ablation;
mod loss;
mod optim;
mod prepare;
mod rollout;
mod schedule;
mod trainer;

pub use ablation::{run_ablation, AblationKind, AblationRow, AblationSetup, AblationTable};
pub use loss::{frame_l2re, l2re, loss_weights, masked_loss, physical, LossKind};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamState, AdamWConfig};
pub use prepare::{prepare, split_trajectories, Prepared};
pub use rollout::{one_step_l2re, reattach, rollout, rollout_curve, rollout_l2re, EvalSet, Rollout};
pub use schedule::{one_cycle_lr, warmup_steps, FINAL_DIVISOR, WARMUP_START_DIVISOR};
pub use trainer::{train, EpochRecord, EvalRecord, MetricsLog, RunOptions, TrainConfig, Trainer};

use thiserror::Error;

use crate::data::DataError;
use crate::io::CheckpointError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("loss was not finite twice in a row (step {step}, loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
