use std::collections::BTreeMap;

use thiserror::Error;

use super::grf::gaussian_random_field;
use super::{solve, Equation, Forcing, SolverError, SolverSpec};
use crate::io::{DatasetMeta, TrajectoryDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error("n_traj must be at least 1")]
    Empty,
    #[error(transparent)]
    Spec(SolverError),
    #[error("trajectory {index} failed: {source}")]
    Trajectory { index: usize, source: SolverError },
}

fn coefficients(equation: &Equation) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    match *equation {
        Equation::Heat { nu, .. } => {
            map.insert("nu".into(), nu);
        }
        Equation::NsVorticity { nu, forcing } => {
            map.insert("nu".into(), nu);
            if let Forcing::Diagonal { amplitude } = forcing {
                map.insert("forcing_amplitude".into(), amplitude);
            }
        }
        Equation::DiffusionReaction { du, dv, k, reaction } => {
            map.insert("du".into(), du);
            map.insert("dv".into(), dv);
            map.insert("k".into(), k);
            map.insert("reaction".into(), if reaction { 1.0 } else { 0.0 });
        }
    }
    map
}

/// Initial condition for trajectory `index`: one random field per channel,
/// seeded by `seed ^ index`.
pub fn initial_condition(spec: &SolverSpec, seed: u64, index: usize) -> Vec<f64> {
    let n = spec.resolution;
    let c = spec.equation.channels();
    let base = seed ^ index as u64;
    let fields: Vec<Vec<f64>> = (0..c)
        .map(|ch| gaussian_random_field(n, &spec.init, base.wrapping_add((ch as u64) << 32)))
        .collect();
    (0..n * n).flat_map(|p| fields.iter().map(move |f| f[p])).collect()
}

/// Solves `n_traj` trajectories from random smooth initial conditions and packs
/// them, with per-channel statistics, into a dataset.
pub fn generate_dataset(spec: &SolverSpec, n_traj: usize, seed: u64) -> Result<TrajectoryDataset, GenerateError> {
    if n_traj == 0 {
        return Err(GenerateError::Empty);
    }
    spec.validate().map_err(GenerateError::Spec)?;
    let n = spec.resolution;
    let c = spec.equation.channels();
    let t = spec.n_saves();
    let mut values = Vec::with_capacity(n_traj * t * n * n * c);
    let mut mask = Vec::with_capacity(n_traj * n * n);
    for index in 0..n_traj {
        let init = initial_condition(spec, seed, index);
        let traj = solve(spec, &init).map_err(|source| GenerateError::Trajectory { index, source })?;
        values.extend(traj.values.iter().map(|&v| v as f32));
        mask.extend_from_slice(&traj.mask);
        log::debug!("generated trajectory {}/{}", index + 1, n_traj);
    }
    let mut ds = TrajectoryDataset {
        n: n_traj,
        t,
        h: n,
        w: n,
        c,
        values,
        mask,
        meta: DatasetMeta {
            pde: spec.equation.kind().as_str().into(),
            coefficients: coefficients(&spec.equation),
            dt_save: spec.dt_save(),
            channel_names: spec.equation.channel_names(),
            mean: vec![],
            std: vec![],
            seed,
        },
    };
    let (mean, std) = ds.channel_stats();
    ds.meta.mean = mean;
    ds.meta.std = std;
    Ok(ds)
}
