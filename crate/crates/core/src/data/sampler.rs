use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{window_starts, DataError, UnifiedDataset};

const NOISE_SALT: u64 = 0x6e6f_6973_6521;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl SamplerSpec {
    /// Dataset probabilities `w_k / sum_j w_j`.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }
}

/// Trajectory count and admissible window starts of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRange {
    pub trajectories: usize,
    pub starts: std::ops::RangeInclusive<isize>,
}

impl WindowRange {
    pub fn of(ds: &UnifiedDataset, t_ctx: usize, left_pad: bool) -> Self {
        Self {
            trajectories: ds.n,
            starts: window_starts(ds.t, t_ctx, left_pad),
        }
    }

    pub fn windows(&self) -> usize {
        self.starts.clone().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub dataset: usize,
    pub traj: usize,
    pub t_start: isize,
}

/// Counter-based sampler: draw `i` depends only on `(seed, i)`, so any stream
/// position can be reproduced directly and worker sub-streams interleave into
/// the same global sequence.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    cumulative: Vec<f64>,
    ranges: Vec<WindowRange>,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(ranges: Vec<WindowRange>, spec: &SamplerSpec) -> Result<Self, DataError> {
        if spec.weights.len() != ranges.len() || ranges.is_empty() {
            return Err(DataError::WeightCount {
                weights: spec.weights.len(),
                datasets: ranges.len(),
            });
        }
        for (index, (&weight, r)) in spec.weights.iter().zip(&ranges).enumerate() {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(DataError::NonPositiveWeight { index, weight });
            }
            if r.trajectories == 0 || r.windows() == 0 {
                return Err(DataError::EmptyDataset(index));
            }
        }
        let mut acc = 0.0;
        let cumulative = spec
            .probabilities()
            .into_iter()
            .map(|q| {
                acc += q;
                acc
            })
            .collect();
        Ok(Self {
            cumulative,
            ranges,
            seed: spec.seed,
        })
    }

    pub fn draw(&self, index: u64) -> Draw {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let u: f64 = rng.random();
        let dataset = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let r = &self.ranges[dataset];
        let traj = rng.random_range(0..r.trajectories);
        let t_start = rng.random_range(*r.starts.start() as i64..=*r.starts.end() as i64) as isize;
        Draw { dataset, traj, t_start }
    }

    /// Draws `start, start + 1, ...`.
    pub fn stream(&self, start: u64) -> impl Iterator<Item = Draw> + '_ {
        (start..).map(move |i| self.draw(i))
    }

    /// Worker `worker` of `workers` takes draws `worker, worker + workers, ...`.
    pub fn worker_stream(&self, worker: u64, workers: u64) -> impl Iterator<Item = Draw> + '_ {
        (worker..).step_by(workers as usize).map(move |i| self.draw(i))
    }

    /// Independent generator for the noise of draw `index`.
    pub fn noise_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ NOISE_SALT);
        rng.set_stream(index);
        rng
    }
}
