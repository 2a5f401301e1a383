use crate::data::{pad_channels_and_mask, standardize, unify_resolution, ChannelStats, DataError, UnifiedDataset};
use crate::io::TrajectoryDataset;

/// A dataset ready for training: resampled, standardized and padded.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: UnifiedDataset,
    pub stats: ChannelStats,
}

/// Resamples to `resolution`, standardizes with `stats` (the dataset's own
/// statistics when `None`) and pads to `c_max` channels plus the mask.
pub fn prepare(
    ds: &TrajectoryDataset,
    resolution: usize,
    c_max: usize,
    stats: Option<&ChannelStats>,
) -> Result<Prepared, DataError> {
    let stats = stats.cloned().unwrap_or_else(|| ChannelStats::from_meta(ds));
    let resampled = if ds.h == resolution && ds.w == resolution {
        ds.clone()
    } else {
        unify_resolution(ds, resolution)?
    };
    let standardized = standardize(&resampled, &stats)?;
    let data = pad_channels_and_mask(&standardized, c_max, 0.0)?;
    Ok(Prepared { data, stats })
}

/// First `n_train` trajectories and the rest.
pub fn split_trajectories(ds: &TrajectoryDataset, n_train: usize) -> (TrajectoryDataset, TrajectoryDataset) {
    let n_train = n_train.min(ds.n);
    (ds.slice(0..n_train), ds.slice(n_train..ds.n))
}
