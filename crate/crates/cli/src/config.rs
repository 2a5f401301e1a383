use std::path::Path;

use dpot::model::ModelConfig;
use dpot::pde::SolverSpec;
use dpot::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_VAR: &str = "DPOT_SEED";

/// Seed from the environment, if set.
pub fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_VAR}={s:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_VAR}: {e}"))),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::File {
        path: path.display().to_string(),
        source: e,
    })
}

/// Solver settings plus the number of trajectories to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    #[serde(flatten)]
    pub solver: SolverSpec,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
}

fn default_n_traj() -> usize {
    16
}

/// Settings of a training run. Omitted fields take their defaults; the
/// resolved form written next to the checkpoint can be passed back verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset files; `--data` takes precedence.
    #[serde(default)]
    pub data: Vec<String>,
    /// Architecture; defaults to nano sized for the data.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Physical channels after padding; defaults to the widest dataset.
    #[serde(default)]
    pub c_max: Option<usize>,
    /// Trailing trajectories of each dataset kept out of training for evaluation.
    #[serde(default)]
    pub holdout: usize,
    #[serde(default = "default_rollout_steps")]
    pub rollout_steps: usize,
    /// Checkpoint the run was initialized from.
    #[serde(default)]
    pub from: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn default_rollout_steps() -> usize {
    10
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: Vec::new(),
            model: None,
            c_max: None,
            holdout: 0,
            rollout_steps: default_rollout_steps(),
            from: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }
}
