use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    /// Updates skipped because a gradient was not finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            skipped: 0,
        }
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// Returns `false`, leaving everything untouched, when any gradient entry is
/// not finite.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) -> bool {
    assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
    assert_eq!(params.len(), state.m.len(), "parameter and state counts differ");
    if grads.iter().any(|g| !g.all_finite()) {
        state.skipped += 1;
        log::warn!(
            "non-finite gradient; skipping update ({} skipped so far)",
            state.skipped
        );
        return false;
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape differs from parameter");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *x -= lr * cfg.weight_decay * *x + lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    true
}
