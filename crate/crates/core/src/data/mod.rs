//! Dataset preparation: resolution unification, channel padding with a mask
//! channel, standardization, windowing, balanced sampling and noise injection.

mod noise;
pub mod resample;
mod sampler;

pub use noise::{context_rms, inject_noise};
pub use resample::{fourier_resample, nearest_mask};
pub use sampler::{BalancedSampler, Draw, SamplerSpec, WindowRange};

use thiserror::Error;

use crate::io::TrajectoryDataset;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("target resolution {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("resolution {0} is below the minimum of 4")]
    TooSmall(usize),
    #[error("dataset has {channels} channels but C_max is {c_max}")]
    ChannelOverflow { channels: usize, c_max: usize },
    #[error("target frame {target} out of range for a trajectory of {len} frames")]
    TargetOutOfRange { target: isize, len: usize },
    #[error("trajectory index {index} out of range ({n} trajectories)")]
    TrajectoryOutOfRange { index: usize, n: usize },
    #[error("context length must be at least 1")]
    EmptyContext,
    #[error("dataset {0} is empty but has positive weight")]
    EmptyDataset(usize),
    #[error("sampler weight {weight} for dataset {index} is not positive")]
    NonPositiveWeight { index: usize, weight: f64 },
    #[error("{weights} sampler weights for {datasets} datasets")]
    WeightCount { weights: usize, datasets: usize },
    #[error("channel statistics are not finite or have the wrong length")]
    BadStats,
}

/// Per-channel affine normalization constants.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_meta(ds: &TrajectoryDataset) -> Self {
        Self {
            mean: ds.meta.mean.clone(),
            std: ds.meta.std.clone(),
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Validates the statistics and clamps zero standard deviations to 1.
    fn checked(&self, channels: usize) -> Result<ChannelStats, DataError> {
        if self.mean.len() != channels
            || self.std.len() != channels
            || self.mean.iter().chain(&self.std).any(|v| !v.is_finite())
        {
            return Err(DataError::BadStats);
        }
        let std = self
            .std
            .iter()
            .enumerate()
            .map(|(c, &s)| {
                if s > 0.0 {
                    s
                } else {
                    log::warn!("channel {c} has zero standard deviation; clamping to 1");
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats {
            mean: self.mean.clone(),
            std,
        })
    }

    /// Maps `[..., C]` interleaved values in place: `(x - mean) / std`.
    pub fn apply(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let s = if self.std[i % c] > 0.0 { self.std[i % c] } else { 1.0 };
            *v = (*v - self.mean[i % c]) / s;
        }
    }

    /// Inverse of [`ChannelStats::apply`].
    pub fn invert(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let s = if self.std[i % c] > 0.0 { self.std[i % c] } else { 1.0 };
            *v = *v * s + self.mean[i % c];
        }
    }
}

fn map_channels(
    ds: &TrajectoryDataset,
    stats: &ChannelStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<TrajectoryDataset, DataError> {
    let stats = stats.checked(ds.c)?;
    let mut out = ds.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        let c = i % ds.c;
        *v = f(*v as f64, stats.mean[c], stats.std[c]) as f32;
    }
    Ok(out)
}

/// Per-channel z-scoring. Channels with zero spread pass through with std 1.
pub fn standardize(ds: &TrajectoryDataset, stats: &ChannelStats) -> Result<TrajectoryDataset, DataError> {
    map_channels(ds, stats, |x, m, s| (x - m) / s)
}

pub fn destandardize(ds: &TrajectoryDataset, stats: &ChannelStats) -> Result<TrajectoryDataset, DataError> {
    map_channels(ds, stats, |x, m, s| x * s + m)
}

fn check_target(target: usize) -> Result<(), DataError> {
    if target < 4 {
        return Err(DataError::TooSmall(target));
    }
    if !target.is_power_of_two() {
        return Err(DataError::NotPowerOfTwo(target));
    }
    Ok(())
}

/// Resamples frames `[frames, h, w, c]` channel by channel. Channels flagged in
/// `binary` are resampled by nearest neighbour instead of Fourier interpolation.
fn resample_frames(
    values: &[f32],
    (h, w, c): (usize, usize, usize),
    target: usize,
    binary: impl Fn(usize) -> bool,
) -> Vec<f32> {
    let frames = values.len() / (h * w * c);
    let mut out = vec![0f32; frames * target * target * c];
    let mut field = vec![0.0; h * w];
    for f in 0..frames {
        let src = &values[f * h * w * c..(f + 1) * h * w * c];
        let dst = &mut out[f * target * target * c..(f + 1) * target * target * c];
        for ch in 0..c {
            let resampled: Vec<f64> = if binary(ch) {
                let m: Vec<u8> = (0..h * w).map(|p| u8::from(src[p * c + ch] != 0.0)).collect();
                nearest_mask(&m, (h, w), (target, target))
                    .into_iter()
                    .map(f64::from)
                    .collect()
            } else {
                for (p, v) in field.iter_mut().enumerate() {
                    *v = src[p * c + ch] as f64;
                }
                fourier_resample(&field, (h, w), (target, target))
            };
            for (p, v) in resampled.into_iter().enumerate() {
                dst[p * c + ch] = v as f32;
            }
        }
    }
    out
}

/// Brings every frame to `target x target`: Fourier zero-padding when refining,
/// Fourier truncation when coarsening, nearest neighbour for the mask.
pub fn unify_resolution(ds: &TrajectoryDataset, target: usize) -> Result<TrajectoryDataset, DataError> {
    check_target(target)?;
    if ds.h.min(ds.w) < 4 {
        return Err(DataError::TooSmall(ds.h.min(ds.w)));
    }
    let values = resample_frames(&ds.values, (ds.h, ds.w, ds.c), target, |_| false);
    let mask = ds
        .mask
        .chunks_exact(ds.h * ds.w)
        .flat_map(|m| nearest_mask(m, (ds.h, ds.w), (target, target)))
        .collect();
    Ok(TrajectoryDataset {
        h: target,
        w: target,
        values,
        mask,
        ..ds.clone()
    })
}

/// Trajectories padded to a common channel count with the mask appended as the
/// last channel: `[n, t, h, w, c_max + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedDataset {
    pub name: String,
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c_max: usize,
    /// `true` for physical channels, `false` for padding; length `c_max`.
    pub valid: Vec<bool>,
    pub pad_value: f32,
    pub values: Vec<f32>,
    pub dt_save: f64,
}

impl UnifiedDataset {
    pub fn channels(&self) -> usize {
        self.c_max + 1
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.channels()
    }

    pub fn frame(&self, traj: usize, t: usize) -> &[f32] {
        let start = (traj * self.t + t) * self.frame_len();
        &self.values[start..start + self.frame_len()]
    }

    /// Frame as a `[h, w, c_max + 1]` tensor.
    pub fn frame_tensor(&self, traj: usize, t: usize) -> Tensor {
        let data = self.frame(traj, t).iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.h, self.w, self.channels()], data).expect("frame shape")
    }

    pub fn unify_resolution(&self, target: usize) -> Result<UnifiedDataset, DataError> {
        check_target(target)?;
        self.resample(target)
    }

    /// Like [`UnifiedDataset::unify_resolution`] for any target of at least 4,
    /// used to evaluate at grids outside the training family.
    pub fn resample(&self, target: usize) -> Result<UnifiedDataset, DataError> {
        if target < 4 {
            return Err(DataError::TooSmall(target));
        }
        let c = self.channels();
        let values = resample_frames(&self.values, (self.h, self.w, c), target, |ch| ch == c - 1);
        Ok(UnifiedDataset {
            h: target,
            w: target,
            values,
            valid: self.valid.clone(),
            name: self.name.clone(),
            ..*self
        })
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> UnifiedDataset {
        let tl = self.t * self.frame_len();
        UnifiedDataset {
            n: range.len(),
            values: self.values[range.start * tl..range.end * tl].to_vec(),
            valid: self.valid.clone(),
            name: self.name.clone(),
            ..*self
        }
    }
}

/// Appends `c_max - c` channels filled with `pad_value`, then the mask channel.
pub fn pad_channels_and_mask(
    ds: &TrajectoryDataset,
    c_max: usize,
    pad_value: f32,
) -> Result<UnifiedDataset, DataError> {
    if ds.c > c_max {
        return Err(DataError::ChannelOverflow { channels: ds.c, c_max });
    }
    let hw = ds.h * ds.w;
    let mut values = Vec::with_capacity(ds.n * ds.t * hw * (c_max + 1));
    for n in 0..ds.n {
        let mask = ds.trajectory_mask(n);
        for t in 0..ds.t {
            let frame = ds.frame(n, t);
            for p in 0..hw {
                values.extend_from_slice(&frame[p * ds.c..(p + 1) * ds.c]);
                values.extend(std::iter::repeat_n(pad_value, c_max - ds.c));
                values.push(f32::from(mask[p]));
            }
        }
    }
    Ok(UnifiedDataset {
        name: ds.meta.pde.clone(),
        n: ds.n,
        t: ds.t,
        h: ds.h,
        w: ds.w,
        c_max,
        valid: (0..c_max).map(|c| c < ds.c).collect(),
        pad_value,
        values,
        dt_save: ds.meta.dt_save,
    })
}

/// One training example: `context` is `[t_ctx, h, w, c_max + 1]`, `target` is
/// `[h, w, c_max + 1]`; the last channel of both is the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSample {
    pub context: Tensor,
    pub target: Tensor,
    pub dataset_id: usize,
    pub valid: Vec<bool>,
}

/// Range of window starts whose target exists. With `left_pad`, starts go down
/// to `-(t_ctx - 1)` and missing frames replicate frame 0.
pub fn window_starts(len: usize, t_ctx: usize, left_pad: bool) -> std::ops::RangeInclusive<isize> {
    let last = len as isize - 1 - t_ctx as isize;
    let first = if left_pad { -(t_ctx as isize - 1) } else { 0 };
    first..=last
}

/// Context frames `[t_start, t_start + t_ctx)` and the following target frame.
/// The target must be frame 1 or later so at least one real frame precedes it.
pub fn make_window(
    ds: &UnifiedDataset,
    dataset_id: usize,
    traj: usize,
    t_start: isize,
    t_ctx: usize,
) -> Result<UnifiedSample, DataError> {
    if t_ctx == 0 {
        return Err(DataError::EmptyContext);
    }
    if traj >= ds.n {
        return Err(DataError::TrajectoryOutOfRange { index: traj, n: ds.n });
    }
    let target_idx = t_start + t_ctx as isize;
    if target_idx < 1 || target_idx >= ds.t as isize {
        return Err(DataError::TargetOutOfRange {
            target: target_idx,
            len: ds.t,
        });
    }
    let c = ds.channels();
    let mut context = Vec::with_capacity(t_ctx * ds.frame_len());
    for k in 0..t_ctx as isize {
        let t = (t_start + k).max(0) as usize;
        context.extend(ds.frame(traj, t).iter().map(|&v| v as f64));
    }
    let target = ds.frame(traj, target_idx as usize).iter().map(|&v| v as f64).collect();
    Ok(UnifiedSample {
        context: Tensor::new(&[t_ctx, ds.h, ds.w, c], context).expect("context shape"),
        target: Tensor::new(&[ds.h, ds.w, c], target).expect("target shape"),
        dataset_id,
        valid: ds.valid.clone(),
    })
}
