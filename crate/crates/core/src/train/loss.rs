use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Masked squared error divided by the masked squared norm of the target.
    #[default]
    Relative,
    /// Masked mean squared error.
    Absolute,
}

/// Per-pixel, per-channel weights of a `[H, W, C + 1]` frame: the mask value
/// on physical channels, zero on padding.
pub fn loss_weights(target: &Tensor, valid: &[bool]) -> Tensor {
    let c = *target.shape().last().expect("frame has channels") - 1;
    let s = target.shape();
    let mut out = Vec::with_capacity(target.numel() / (c + 1) * c);
    for px in target.data().chunks_exact(c + 1) {
        out.extend((0..c).map(|ch| if valid[ch] { px[c] } else { 0.0 }));
    }
    Tensor::new(&[s[0], s[1], c], out).expect("weight shape")
}

/// Physical channels of a `[H, W, C + 1]` frame.
pub fn physical(frame: &Tensor) -> Tensor {
    let s = frame.shape();
    let c = s[2] - 1;
    let data = frame
        .data()
        .chunks_exact(c + 1)
        .flat_map(|px| px[..c].iter().copied())
        .collect();
    Tensor::new(&[s[0], s[1], c], data).expect("physical shape")
}

/// Masked loss of one prediction `[H, W, C]` against a `[H, W, C + 1]` target.
pub fn masked_loss(g: &mut Graph, pred: Var, target: &Tensor, valid: &[bool], kind: LossKind) -> Result<Var> {
    let w = loss_weights(target, valid);
    let t = physical(target);
    if g.shape(pred) != t.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "masked_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let denom = match kind {
        LossKind::Relative => t.data().iter().zip(w.data()).map(|(x, m)| m * x * x).sum::<f64>(),
        LossKind::Absolute => w.data().iter().sum::<f64>(),
    };
    let denom = if denom > 0.0 { denom } else { 1.0 };
    let tv = g.constant(t);
    let wv = g.constant(w);
    let diff = g.sub(pred, tv)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, wv)?;
    let total = g.sum(weighted)?;
    g.scale(total, 1.0 / denom)
}

/// `||w (pred - truth)|| / ||w truth||`, or `None` when the truth has zero norm.
pub fn l2re(pred: &[f64], truth: &[f64], weights: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len(), "l2re operands differ in length");
    assert_eq!(pred.len(), weights.len(), "l2re weights differ in length");
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, t), w) in pred.iter().zip(truth).zip(weights) {
        num += (w * (p - t)).powi(2);
        den += (w * t).powi(2);
    }
    if den > 0.0 {
        Some((num / den).sqrt())
    } else {
        None
    }
}

/// L2RE of a `[H, W, C]` prediction against a `[H, W, C + 1]` target after
/// undoing the standardization on both.
pub fn frame_l2re(pred: &Tensor, target: &Tensor, valid: &[bool], stats: &ChannelStats) -> Option<f64> {
    let w = loss_weights(target, valid);
    let mut p = pred.data().to_vec();
    let mut t = physical(target).into_data();
    stats.invert(&mut p);
    stats.invert(&mut t);
    l2re(&p, &t, w.data())
}
