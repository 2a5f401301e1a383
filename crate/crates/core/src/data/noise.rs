use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Root mean square over physical channels at mask-interior pixels of a
/// `[..., c_max + 1]` context whose last channel is the mask.
pub fn context_rms(context: &Tensor, valid: &[bool]) -> f64 {
    let c = *context.shape().last().expect("context has a channel axis");
    let (mut sum, mut count) = (0.0, 0usize);
    for px in context.data().chunks_exact(c) {
        if px[c - 1] == 0.0 {
            continue;
        }
        for (ch, v) in px[..c - 1].iter().enumerate() {
            if valid[ch] {
                sum += v * v;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Adds i.i.d. Gaussian noise with standard deviation `eps * rms(context)` to
/// physical channels inside the mask. Mask and padding channels are untouched.
pub fn inject_noise(context: &Tensor, valid: &[bool], eps: f64, rng: &mut impl Rng) -> Tensor {
    let mut out = context.clone();
    if eps == 0.0 {
        return out;
    }
    let sigma = eps * context_rms(context, valid);
    let Ok(normal) = Normal::new(0.0, sigma) else {
        return out;
    };
    let c = *context.shape().last().expect("context has a channel axis");
    for px in out.data_mut().chunks_exact_mut(c) {
        if px[c - 1] == 0.0 {
            continue;
        }
        for (ch, v) in px[..c - 1].iter_mut().enumerate() {
            if valid[ch] {
                *v += normal.sample(rng);
            }
        }
    }
    out
}
