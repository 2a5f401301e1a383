//! Pseudo-spectral solvers on the periodic square `[0, 2pi)^2` that produce
//! training and evaluation trajectories.

mod generate;
mod grf;
mod heat;
mod ns;
mod reaction;
pub mod spectral;

pub use generate::{generate_dataset, initial_condition, GenerateError};
pub use grf::{gaussian_random_field, GrfSpec};
pub use heat::solve_heat;
pub use ns::{enstrophy, kinetic_energy, solve_ns_vorticity, velocity};
pub use reaction::{fitzhugh_nagumo, solve_diffusion_reaction};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver spec: {0}")]
    InvalidSpec(String),
    #[error("initial condition is not finite")]
    NonFiniteInit,
    #[error("initial condition has {actual} values, expected {expected}")]
    InitShape { expected: usize, actual: usize },
    #[error("CFL condition violated at step {step}: measured CFL {cfl:.4} > 0.5")]
    Cfl { step: usize, cfl: f64 },
    #[error("solution blew up at step {step}: max |u| = {max_abs:.3e}")]
    BlowUp { step: usize, max_abs: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Heat,
    NsVorticity,
    DiffusionReaction,
}

impl PdeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PdeKind::Heat => "heat",
            PdeKind::NsVorticity => "ns_vorticity",
            PdeKind::DiffusionReaction => "diffusion_reaction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "heat" => Some(PdeKind::Heat),
            "ns_vorticity" => Some(PdeKind::NsVorticity),
            "diffusion_reaction" => Some(PdeKind::DiffusionReaction),
            _ => None,
        }
    }
}

/// Axis-aligned sub-domain `[x0, x1) x [y0, y1)` in grid indices. Values outside
/// are held at zero and the stored mask is zero there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectMask {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl RectMask {
    pub fn to_mask(&self, n: usize) -> Vec<u8> {
        let mut m = vec![0u8; n * n];
        for i in self.x0..self.x1.min(n) {
            for j in self.y0..self.y1.min(n) {
                m[i * n + j] = 1;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Forcing {
    #[default]
    None,
    /// `amplitude * (sin(x + y) + cos(x + y))`.
    Diagonal { amplitude: f64 },
}

impl Forcing {
    pub fn field(&self, n: usize) -> Vec<f64> {
        let grid = spectral::Periodic2d::new(n);
        let mut f = vec![0.0; n * n];
        if let Forcing::Diagonal { amplitude } = *self {
            for i in 0..n {
                for j in 0..n {
                    let s = grid.coord(i) + grid.coord(j);
                    f[i * n + j] = amplitude * (s.sin() + s.cos());
                }
            }
        }
        f
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pde", rename_all = "snake_case")]
pub enum Equation {
    Heat {
        nu: f64,
        #[serde(default)]
        mask: Option<RectMask>,
    },
    NsVorticity {
        nu: f64,
        #[serde(default)]
        forcing: Forcing,
    },
    /// FitzHugh-Nagumo reaction `R_u = u - u^3 - k - v`, `R_v = u - v`.
    DiffusionReaction {
        du: f64,
        dv: f64,
        k: f64,
        #[serde(default = "default_true")]
        reaction: bool,
    },
}

impl Equation {
    pub fn kind(&self) -> PdeKind {
        match self {
            Equation::Heat { .. } => PdeKind::Heat,
            Equation::NsVorticity { .. } => PdeKind::NsVorticity,
            Equation::DiffusionReaction { .. } => PdeKind::DiffusionReaction,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Equation::DiffusionReaction { .. } => 2,
            _ => 1,
        }
    }

    pub fn channel_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            Equation::Heat { .. } => &["u"],
            Equation::NsVorticity { .. } => &["w"],
            Equation::DiffusionReaction { .. } => &["u", "v"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    #[serde(flatten)]
    pub equation: Equation,
    /// Grid points per side.
    pub resolution: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub save_every: usize,
    #[serde(default)]
    pub init: GrfSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SolverSpec {
    /// Desk-scale default for each equation family at `resolution`.
    pub fn preset(kind: PdeKind, resolution: usize) -> Self {
        let (equation, dt, n_steps, save_every, amplitude) = match kind {
            PdeKind::Heat => (Equation::Heat { nu: 0.1, mask: None }, 0.15, 200, 10, 1.0),
            PdeKind::NsVorticity => (
                Equation::NsVorticity {
                    nu: 0.04,
                    forcing: Forcing::Diagonal { amplitude: 0.1 },
                },
                0.01,
                600,
                20,
                0.5,
            ),
            PdeKind::DiffusionReaction => (
                Equation::DiffusionReaction {
                    du: 1e-2,
                    dv: 5e-2,
                    k: 5e-3,
                    reaction: true,
                },
                0.01,
                200,
                10,
                0.5,
            ),
        };
        SolverSpec {
            equation,
            resolution,
            dt,
            n_steps,
            save_every,
            init: GrfSpec {
                amplitude,
                ..GrfSpec::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidSpec(msg));
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return bad(format!("H must be a power of two >= 4, got {}", self.resolution));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.save_every == 0 || !self.n_steps.is_multiple_of(self.save_every) {
            return bad(format!(
                "save_every ({}) must divide n_steps ({})",
                self.save_every, self.n_steps
            ));
        }
        let non_negative = match self.equation {
            Equation::Heat { nu, .. } | Equation::NsVorticity { nu, .. } => nu >= 0.0,
            Equation::DiffusionReaction { du, dv, .. } => du >= 0.0 && dv >= 0.0,
        };
        if !non_negative {
            return bad("diffusion coefficients must be non-negative".into());
        }
        Ok(())
    }

    pub fn n_saves(&self) -> usize {
        self.n_steps / self.save_every + 1
    }

    pub fn dt_save(&self) -> f64 {
        self.dt * self.save_every as f64
    }
}

/// Solver output: `[T, H, W, C]` values in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub pde: PdeKind,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    /// `[H, W]`, 1 inside the physical domain.
    pub mask: Vec<u8>,
    pub dt_save: f64,
    pub channel_names: Vec<String>,
}

impl Trajectory {
    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.values[t * n..(t + 1) * n]
    }

    /// Channel `c` of frame `t` as an `[H, W]` field.
    pub fn field(&self, t: usize, c: usize) -> Vec<f64> {
        self.frame(t).iter().skip(c).step_by(self.channels).copied().collect()
    }
}

/// Collects saved frames and checks them for finiteness as they arrive.
pub(crate) struct FrameSink {
    values: Vec<f64>,
    frames: usize,
}

impl FrameSink {
    pub fn new(capacity: usize) -> Self {
        Self {
            values: Vec::with_capacity(capacity),
            frames: 0,
        }
    }

    /// Appends a frame given as one `[H, W]` field per channel.
    pub fn push(&mut self, fields: &[&[f64]]) {
        let n = fields[0].len();
        for p in 0..n {
            for f in fields {
                assert!(f[p].is_finite(), "solver produced a non-finite value");
                self.values.push(f[p]);
            }
        }
        self.frames += 1;
    }

    pub fn finish(self, equation: &Equation, n: usize, dt_save: f64, mask: Vec<u8>) -> Trajectory {
        Trajectory {
            pde: equation.kind(),
            frames: self.frames,
            h: n,
            w: n,
            channels: equation.channels(),
            values: self.values,
            mask,
            dt_save,
            channel_names: equation.channel_names(),
        }
    }
}

pub(crate) fn check_init(init: &[f64], expected: usize) -> Result<(), SolverError> {
    if init.len() != expected {
        return Err(SolverError::InitShape {
            expected,
            actual: init.len(),
        });
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteInit);
    }
    Ok(())
}

/// Runs the solver selected by `spec.equation` from `init` (`[H, W, C]`).
pub fn solve(spec: &SolverSpec, init: &[f64]) -> Result<Trajectory, SolverError> {
    match spec.equation {
        Equation::Heat { nu, .. } => solve_heat(init, nu, spec),
        Equation::NsVorticity { nu, forcing } => solve_ns_vorticity(init, nu, &forcing, spec),
        Equation::DiffusionReaction { du, dv, k, .. } => solve_diffusion_reaction(init, du, dv, k, spec),
    }
}
