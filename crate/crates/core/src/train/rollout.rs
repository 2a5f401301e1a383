use crate::data::{make_window, ChannelStats, UnifiedDataset};
use crate::model::{ModelError, Predictor};
use crate::tensor::Tensor;

use super::loss::frame_l2re;
use super::TrainError;

/// Predicted frames of an auto-regressive rollout, each `[H, W, C + 1]` with
/// the mask re-attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub frames: Vec<Tensor>,
    /// Set when a prediction went non-finite before `n_steps` were produced.
    pub stopped_at: Option<usize>,
}

/// Appends the mask and padding channels of `like` to a `[H, W, C]` prediction.
pub fn reattach(pred: &Tensor, like: &Tensor, valid: &[bool]) -> Tensor {
    let s = like.shape();
    let c = s[2] - 1;
    let mut out = like.clone();
    for (px, p) in out.data_mut().chunks_exact_mut(c + 1).zip(pred.data().chunks_exact(c)) {
        for ch in 0..c {
            if valid[ch] {
                px[ch] = p[ch];
            }
        }
    }
    out
}

/// Feeds predictions back as context: each step drops the oldest frame and
/// appends the new one. No noise is added.
pub fn rollout(
    model: &impl Predictor,
    context: &Tensor,
    valid: &[bool],
    n_steps: usize,
) -> Result<Rollout, ModelError> {
    assert!(n_steps >= 1, "rollout needs at least one step");
    let s = context.shape().to_vec();
    let frame_len: usize = s[1..].iter().product();
    let t = s[0];
    let mut window = context.data().to_vec();
    let last_frame = Tensor::new(&s[1..], window[(t - 1) * frame_len..].to_vec())?;
    let mut frames = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let ctx = Tensor::new(&s, window.clone())?;
        let pred = model.predict(&ctx)?;
        if !pred.all_finite() {
            log::warn!("rollout stopped at step {step}: non-finite prediction");
            return Ok(Rollout {
                frames,
                stopped_at: Some(step),
            });
        }
        let frame = reattach(&pred, &last_frame, valid);
        window.drain(..frame_len);
        window.extend_from_slice(frame.data());
        frames.push(frame);
    }
    Ok(Rollout {
        frames,
        stopped_at: None,
    })
}

/// Held-out data with the statistics needed to report errors in physical units.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub data: UnifiedDataset,
    pub stats: ChannelStats,
    pub rollout_steps: usize,
}

impl EvalSet {
    pub fn name(&self) -> &str {
        &self.data.name
    }
}

/// Mean one-step L2RE over every trajectory and every window start (no left
/// padding), at most `max_windows` windows per trajectory, evenly spaced.
pub fn one_step_l2re(model: &impl Predictor, set: &EvalSet, max_windows: usize) -> Result<f64, TrainError> {
    let t_ctx = model.t_ctx();
    let ds = &set.data;
    let last = ds.t.saturating_sub(t_ctx + 1);
    let count = (last + 1).min(max_windows.max(1));
    let mut acc = Mean::default();
    for traj in 0..ds.n {
        for k in 0..count {
            let start = if count == 1 { 0 } else { k * last / (count - 1) };
            let w = make_window(ds, 0, traj, start as isize, t_ctx)?;
            let pred = model.predict(&w.context)?;
            acc.push(frame_l2re(&pred, &w.target, &w.valid, &set.stats));
        }
    }
    acc.finish()
}

/// Per-step mean L2RE of rollouts started from the first `t_ctx` frames of
/// every trajectory. Rollouts that stop early contribute infinity from the
/// failing step on.
pub fn rollout_curve(model: &impl Predictor, set: &EvalSet, n_steps: usize) -> Result<Vec<f64>, TrainError> {
    let t_ctx = model.t_ctx();
    let ds = &set.data;
    let n_steps = n_steps.min(ds.t - t_ctx);
    if n_steps == 0 {
        return Err(TrainError::Config(format!(
            "trajectories of {} frames leave no rollout steps after {t_ctx} context frames",
            ds.t
        )));
    }
    let mut per_step = vec![Mean::default(); n_steps];
    for traj in 0..ds.n {
        let w = make_window(ds, 0, traj, 0, t_ctx)?;
        let r = rollout(model, &w.context, &w.valid, n_steps)?;
        for (k, acc) in per_step.iter_mut().enumerate() {
            let truth = ds.frame_tensor(traj, t_ctx + k);
            match r.frames.get(k) {
                Some(f) => acc.push(frame_l2re(&super::loss::physical(f), &truth, &w.valid, &set.stats)),
                None => acc.push(Some(f64::INFINITY)),
            }
        }
    }
    per_step.into_iter().map(Mean::finish).collect()
}

/// Mean of [`rollout_curve`] over all steps.
pub fn rollout_l2re(model: &impl Predictor, set: &EvalSet, n_steps: usize) -> Result<f64, TrainError> {
    let curve = rollout_curve(model, set, n_steps)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Running mean that skips samples with zero-norm truth.
#[derive(Debug, Clone, Default)]
struct Mean {
    sum: f64,
    count: usize,
    excluded: usize,
}

impl Mean {
    fn push(&mut self, x: Option<f64>) {
        match x {
            Some(v) => {
                self.sum += v;
                self.count += 1;
            }
            None => self.excluded += 1,
        }
    }

    fn finish(self) -> Result<f64, TrainError> {
        if self.excluded > 0 {
            log::warn!("{} samples with zero-norm truth excluded from L2RE", self.excluded);
        }
        if self.count == 0 {
            return Err(TrainError::Config("no samples with non-zero truth to evaluate".into()));
        }
        Ok(self.sum / self.count as f64)
    }
}
