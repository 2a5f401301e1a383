use serde::{Deserialize, Serialize};

use crate::data::UnifiedDataset;
use crate::model::{AtResolution, DpotModel, ModelConfig, ResolutionMode};

use super::rollout::{one_step_l2re, rollout_l2re, EvalSet};
use super::trainer::{TrainConfig, Trainer};
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Heads,
    Patch,
    Noise,
    /// Evaluation-only: one model trained at the base grid, scored on others.
    Resolution,
}

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Heads => "heads",
            Self::Patch => "patch",
            Self::Noise => "noise",
            Self::Resolution => "resolution",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "heads" => Some(Self::Heads),
            "patch" => Some(Self::Patch),
            "noise" => Some(Self::Noise),
            "resolution" => Some(Self::Resolution),
            _ => None,
        }
    }
}

/// Shared model, schedule and data for every grid point.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub sets: &'a [UnifiedDataset],
    pub eval: &'a [EvalSet],
    pub resolution_mode: ResolutionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub one_step: Vec<f64>,
    pub rollout: Vec<f64>,
    /// False for evaluation-only rows.
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub datasets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "{}", self.kind.as_str())?;
        for d in &self.datasets {
            write!(w, ",onestep_{d}")?;
        }
        for d in &self.datasets {
            write!(w, ",rollout_{d}")?;
        }
        writeln!(w, ",trained")?;
        for r in &self.rows {
            write!(w, "{}", r.value)?;
            for v in r.one_step.iter().chain(&r.rollout) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", r.trained)?;
        }
        Ok(())
    }
}

fn evaluate(model: &DpotModel, eval: &[EvalSet], windows: usize) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut one = Vec::new();
    let mut roll = Vec::new();
    for set in eval {
        one.push(one_step_l2re(model, set, windows)?);
        roll.push(rollout_l2re(model, set, set.rollout_steps)?);
    }
    Ok((one, roll))
}

fn fit(model: ModelConfig, train: TrainConfig, setup: &AblationSetup) -> Result<DpotModel, TrainError> {
    let mut t = Trainer::new(DpotModel::new(model, setup.model_seed)?, train)?;
    t.run(setup.sets, &[], &Default::default())?;
    Ok(t.model)
}

/// Trains one model per grid value (same seeds and data) and evaluates it on
/// the held-out sets. For [`AblationKind::Resolution`] a single model is
/// trained at the base grid and every held-out set is resampled to each grid
/// value for evaluation.
pub fn run_ablation(kind: AblationKind, grid: &[f64], setup: &AblationSetup) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::with_capacity(grid.len());
    let windows = setup.train.eval_windows;
    let base_model = if kind == AblationKind::Resolution {
        Some(fit(setup.model.clone(), setup.train.clone(), setup)?)
    } else {
        None
    };
    for &value in grid {
        let as_count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(TrainError::Config(format!(
                    "{} grid value {value} is not a positive integer",
                    kind.as_str()
                )))
            }
        };
        let row = match kind {
            AblationKind::Heads | AblationKind::Patch => {
                let mut m = setup.model.clone();
                if kind == AblationKind::Heads {
                    m.heads = as_count()?;
                } else {
                    m.patch = as_count()?;
                }
                m.validate()?;
                let model = fit(m, setup.train.clone(), setup)?;
                let (one_step, rollout) = evaluate(&model, setup.eval, windows)?;
                AblationRow {
                    value,
                    one_step,
                    rollout,
                    trained: true,
                }
            }
            AblationKind::Noise => {
                let mut t = setup.train.clone();
                t.noise = value;
                let model = fit(setup.model.clone(), t, setup)?;
                let (one_step, rollout) = evaluate(&model, setup.eval, windows)?;
                AblationRow {
                    value,
                    one_step,
                    rollout,
                    trained: true,
                }
            }
            AblationKind::Resolution => {
                let res = as_count()?;
                let model = base_model.as_ref().expect("trained above");
                let at = AtResolution {
                    model,
                    mode: setup.resolution_mode,
                };
                let mut one_step = Vec::new();
                let mut rollout = Vec::new();
                for set in setup.eval {
                    let resampled = EvalSet {
                        data: set.data.resample(res)?,
                        ..set.clone()
                    };
                    one_step.push(one_step_l2re(&at, &resampled, windows)?);
                    rollout.push(rollout_l2re(&at, &resampled, set.rollout_steps)?);
                }
                AblationRow {
                    value,
                    one_step,
                    rollout,
                    trained: false,
                }
            }
        };
        log::info!("ablation {} = {value}: {:?}", kind.as_str(), row.one_step);
        rows.push(row);
    }
    Ok(AblationTable {
        kind,
        datasets: setup.eval.iter().map(|e| e.name().to_string()).collect(),
        rows,
    })
}
