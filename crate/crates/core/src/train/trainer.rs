use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{inject_noise, make_window, BalancedSampler, SamplerSpec, UnifiedDataset, WindowRange};
use crate::io::{save_checkpoint, Checkpoint};
use crate::model::DpotModel;
use crate::tensor::{Graph, Tensor};

use super::loss::{masked_loss, LossKind};
use super::optim::{adamw_step, clip_grad_norm, AdamState, AdamWConfig};
use super::rollout::{one_step_l2re, rollout_l2re, EvalSet};
use super::schedule::one_cycle_lr;
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Relative noise level added to training contexts.
    pub noise: f64,
    pub t_ctx: usize,
    /// Sampling weight of each training dataset.
    pub weights: Vec<f64>,
    pub seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Windows per held-out trajectory for one-step errors.
    pub eval_windows: usize,
    pub clip_norm: f64,
    pub loss: LossKind,
    /// Allow windows that start before frame 0 by replicating it.
    pub left_pad: bool,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_frac: 0.2,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.9,
            noise: 0.0,
            t_ctx: 10,
            weights: vec![1.0],
            seed: 0,
            eval_every: 0,
            eval_windows: 4,
            clip_norm: 1.0,
            loss: LossKind::Relative,
            left_pad: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.peak_lr > 0.0) {
            return fail("peak learning rate must be positive");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail("warm-up fraction must lie strictly between 0 and 1");
        }
        if !(self.noise >= 0.0) {
            return fail("noise level must be non-negative");
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.t_ctx == 0 {
            return fail("epochs, steps per epoch, batch size and context length must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip norm must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn sampler(&self, sets: &[UnifiedDataset]) -> Result<BalancedSampler, TrainError> {
        let ranges = sets
            .iter()
            .map(|d| WindowRange::of(d, self.t_ctx, self.left_pad))
            .collect();
        let spec = SamplerSpec {
            weights: self.weights.clone(),
            seed: self.seed,
        };
        Ok(BalancedSampler::new(ranges, &spec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub one_step: Vec<f64>,
    pub rollout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: Option<EvalRecord>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub datasets: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
}

impl MetricsLog {
    /// Copy with wall-clock entries zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.epochs.iter_mut().for_each(|e| e.wall_s = 0.0);
        out
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }

    /// Wide table: one row per epoch.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "epoch,step,lr,loss")?;
        for d in &self.datasets {
            write!(w, ",onestep_{d}")?;
        }
        for d in &self.datasets {
            write!(w, ",rollout_{d}")?;
        }
        writeln!(w, ",wall_s")?;
        for e in &self.epochs {
            write!(w, "{},{},{},{}", e.epoch, e.step, e.lr, e.train_loss)?;
            let blanks = || std::iter::repeat_n(String::new(), self.datasets.len());
            let (one, roll): (Vec<String>, Vec<String>) = match &e.eval {
                Some(r) => (
                    r.one_step.iter().map(f64::to_string).collect(),
                    r.rollout.iter().map(f64::to_string).collect(),
                ),
                None => (blanks().collect(), blanks().collect()),
            };
            for v in one.iter().chain(&roll) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", e.wall_s)?;
        }
        Ok(())
    }

    /// Long table: `epoch,metric,dataset,value`.
    pub fn write_long_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "epoch,metric,dataset,value")?;
        for e in &self.epochs {
            writeln!(w, "{},train_loss,,{}", e.epoch, e.train_loss)?;
            writeln!(w, "{},lr,,{}", e.epoch, e.lr)?;
            if let Some(r) = &e.eval {
                for (d, v) in self.datasets.iter().zip(&r.one_step) {
                    writeln!(w, "{},onestep_l2re,{d},{v}", e.epoch)?;
                }
                for (d, v) in self.datasets.iter().zip(&r.rollout) {
                    writeln!(w, "{},rollout_l2re,{d},{v}", e.epoch)?;
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)
    }
}

/// Where and when to stop and save.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (for interrupted runs).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    train_config: TrainConfig,
    step: usize,
    adam_t: u64,
    skipped: u64,
    nan_streak: usize,
    metrics: MetricsLog,
}

/// Resumable optimization state. Every random choice is a pure function of
/// the seed and the global sample index, so a run resumed from a checkpoint
/// replays the uninterrupted run exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DpotModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Optimizer steps attempted so far.
    pub step: usize,
    pub metrics: MetricsLog,
    nan_streak: usize,
}

impl Trainer {
    pub fn new(model: DpotModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if config.t_ctx != model.config.t_ctx {
            return Err(TrainError::Config(format!(
                "training context {} differs from model context {}",
                config.t_ctx, model.config.t_ctx
            )));
        }
        let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        Ok(Self {
            adam: AdamState::new(&params),
            model,
            config,
            step: 0,
            metrics: MetricsLog::default(),
            nan_streak: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.config.steps_per_epoch
    }

    /// Mean loss of one batch, with gradients, for the draws
    /// `first_index..first_index + batch`.
    pub fn batch_loss_and_grads(
        &self,
        sampler: &BalancedSampler,
        sets: &[UnifiedDataset],
        first_index: u64,
    ) -> Result<(f64, Vec<Tensor>), TrainError> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let mut total = None;
        for b in 0..cfg.batch_size as u64 {
            let index = first_index + b;
            let draw = sampler.draw(index);
            let sample = make_window(&sets[draw.dataset], draw.dataset, draw.traj, draw.t_start, cfg.t_ctx)?;
            let mut rng = sampler.noise_rng(index);
            let context = inject_noise(&sample.context, &sample.valid, cfg.noise, &mut rng);
            let pred = self.model.forward_sample(&mut g, &bound, &context)?;
            let loss = masked_loss(&mut g, pred, &sample.target, &sample.valid, cfg.loss)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = total.expect("batch is non-empty");
        let mean = g.scale(total, 1.0 / cfg.batch_size as f64)?;
        let value = g.value(mean).item();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        g.backward(mean)?;
        let grads = bound
            .vars
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        Ok((value, grads))
    }

    /// One optimizer step. Returns the batch loss.
    pub fn train_step(&mut self, sampler: &BalancedSampler, sets: &[UnifiedDataset]) -> Result<f64, TrainError> {
        let cfg = self.config.clone();
        let lr = one_cycle_lr(self.step, cfg.total_steps(), cfg.peak_lr, cfg.warmup_frac);
        let first = (self.step * cfg.batch_size) as u64;
        let (loss, mut grads) = self.batch_loss_and_grads(sampler, sets, first)?;
        self.metrics.lr_trace.push(lr);
        self.step += 1;
        if !loss.is_finite() {
            self.nan_streak += 1;
            log::warn!("step {}: non-finite loss {loss}; update skipped", self.step - 1);
            if self.nan_streak >= 2 {
                return Err(TrainError::Diverged {
                    step: self.step - 1,
                    loss,
                });
            }
            return Ok(loss);
        }
        self.nan_streak = 0;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        let mut params: Vec<Tensor> = self.model.params.iter().map(|(_, t)| t.clone()).collect();
        if adamw_step(&mut params, &grads, &mut self.adam, lr, &cfg.adam()) {
            for ((_, slot), p) in self.model.params.iter_mut().zip(params) {
                *slot = p;
            }
        }
        Ok(loss)
    }

    pub fn evaluate(&self, eval: &[EvalSet]) -> Result<EvalRecord, TrainError> {
        let mut rec = EvalRecord {
            one_step: Vec::new(),
            rollout: Vec::new(),
        };
        for set in eval {
            rec.one_step
                .push(one_step_l2re(&self.model, set, self.config.eval_windows)?);
            rec.rollout.push(rollout_l2re(&self.model, set, set.rollout_steps)?);
        }
        Ok(rec)
    }

    /// Trains until the configured epoch count (or `stop_after_epoch`),
    /// evaluating and checkpointing at the configured cadence.
    pub fn run(&mut self, sets: &[UnifiedDataset], eval: &[EvalSet], opts: &RunOptions) -> Result<(), TrainError> {
        let cfg = self.config.clone();
        if sets.is_empty() {
            return Err(TrainError::Config("no training datasets".into()));
        }
        let sampler = cfg.sampler(sets)?;
        self.metrics.datasets = eval.iter().map(|e| e.name().to_string()).collect();
        let end = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
        let started = Instant::now();
        while self.epoch() < end {
            let epoch = self.epoch();
            let mut sum = 0.0;
            let mut finite = 0usize;
            for _ in 0..cfg.steps_per_epoch {
                let loss = self.train_step(&sampler, sets)?;
                if loss.is_finite() {
                    sum += loss;
                    finite += 1;
                }
            }
            let last = epoch + 1 == cfg.epochs;
            let due = cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every);
            let eval_rec = if !eval.is_empty() && (last || due) {
                Some(self.evaluate(eval)?)
            } else {
                None
            };
            let rec = EpochRecord {
                epoch,
                step: self.step,
                lr: *self.metrics.lr_trace.last().expect("at least one step"),
                train_loss: sum / finite.max(1) as f64,
                eval: eval_rec,
                wall_s: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: loss {:.4e} lr {:.3e}{}",
                rec.train_loss,
                rec.lr,
                rec.eval
                    .as_ref()
                    .map_or(String::new(), |r| format!(" eval {:?}", r.one_step))
            );
            self.metrics.epochs.push(rec);
            if let Some(dir) = &opts.checkpoint_dir {
                if cfg.checkpoint_every > 0 && (epoch + 1).is_multiple_of(cfg.checkpoint_every) {
                    save_checkpoint(&self.to_checkpoint(), dir.join(format!("epoch-{:04}", epoch + 1)))?;
                }
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(&self.to_checkpoint(), dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            self.metrics.write_csv(&mut f)?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        for ((k, _), (m, v)) in self.model.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ckpt.optimizer.push((format!("adam.m.{k}"), m.clone()));
            ckpt.optimizer.push((format!("adam.v.{k}"), v.clone()));
        }
        let state = TrainerState {
            train_config: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
            skipped: self.adam.skipped,
            nan_streak: self.nan_streak,
            metrics: self.metrics.clone(),
        };
        ckpt.state = serde_json::to_value(state).expect("trainer state serializes");
        ckpt
    }

    /// Restores a trainer saved by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let model = DpotModel::from_checkpoint(ckpt)?;
        let state: TrainerState = serde_json::from_value(ckpt.state.clone())
            .map_err(|e| TrainError::Config(format!("checkpoint has no trainer state: {e}")))?;
        let mut t = Self::new(model, state.train_config)?;
        let find = |key: String| {
            ckpt.optimizer
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| TrainError::Config(format!("optimizer tensor {key} missing")))
        };
        for (i, (k, _)) in t.model.params.iter().enumerate() {
            t.adam.m[i] = find(format!("adam.m.{k}"))?;
            t.adam.v[i] = find(format!("adam.v.{k}"))?;
        }
        t.adam.t = state.adam_t;
        t.adam.skipped = state.skipped;
        t.step = state.step;
        t.nan_streak = state.nan_streak;
        t.metrics = state.metrics;
        Ok(t)
    }
}

/// Trains `model` from scratch on `sets` and returns the final checkpoint and
/// metrics.
pub fn train(
    model: DpotModel,
    sets: &[UnifiedDataset],
    eval: &[EvalSet],
    config: &TrainConfig,
) -> Result<(Checkpoint, MetricsLog), TrainError> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run(sets, eval, &RunOptions::default())?;
    Ok((t.to_checkpoint(), t.metrics))
}
