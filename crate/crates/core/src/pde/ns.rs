use rustfft::num_complex::Complex64;

use super::spectral::Periodic2d;
use super::{check_init, Equation, Forcing, FrameSink, SolverError, SolverSpec, Trajectory};

const CFL_LIMIT: f64 = 0.5;

/// Velocity `(u, v) = (d_y psi, -d_x psi)` with `lap(psi) = -w`.
pub fn velocity(grid: &Periodic2d, w_hat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    let psi: Vec<Complex64> = w_hat
        .iter()
        .zip(&grid.k2)
        .map(|(&w, &k2)| if k2 > 0.0 { w / k2 } else { Complex64::new(0.0, 0.0) })
        .collect();
    let u = grid.inverse(&grid.derivative(&psi, 1));
    let v: Vec<f64> = grid
        .inverse(&grid.derivative(&psi, 0))
        .into_iter()
        .map(|x| -x)
        .collect();
    (u, v)
}

/// Mean kinetic energy `0.5 * <u^2 + v^2>` of a vorticity field.
pub fn kinetic_energy(w: &[f64]) -> f64 {
    let n = (w.len() as f64).sqrt() as usize;
    let grid = Periodic2d::new(n);
    let (u, v) = velocity(&grid, &grid.forward(w));
    0.5 * u.iter().zip(&v).map(|(a, b)| a * a + b * b).sum::<f64>() / w.len() as f64
}

/// Mean enstrophy `0.5 * <w^2>`.
pub fn enstrophy(w: &[f64]) -> f64 {
    0.5 * w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64
}

struct NsStepper {
    grid: Periodic2d,
    forcing_hat: Vec<Complex64>,
    /// `nu * |k|^2 * dt`.
    diffusion: Vec<f64>,
    dt: f64,
    max_cfl: f64,
}

impl NsStepper {
    /// Dealiased advection term `u . grad(w)` in spectral space.
    fn advection(&mut self, w_hat: &[Complex64]) -> Vec<Complex64> {
        let g = &self.grid;
        let (u, v) = velocity(g, w_hat);
        let wx = g.inverse(&g.derivative(w_hat, 0));
        let wy = g.inverse(&g.derivative(w_hat, 1));
        let mut speed: f64 = 0.0;
        let product: Vec<f64> = (0..u.len())
            .map(|p| {
                speed = speed.max(u[p].hypot(v[p]));
                u[p] * wx[p] + v[p] * wy[p]
            })
            .collect();
        self.max_cfl = self.max_cfl.max(speed * self.dt / g.dx());
        let mut out = g.forward(&product);
        g.dealias(&mut out);
        out
    }

    /// Heun predictor-corrector for advection, Crank-Nicolson for diffusion.
    fn step(&mut self, w_hat: &[Complex64]) -> Vec<Complex64> {
        let n0 = self.advection(w_hat);
        let advance = |this: &Self, adv: &[Complex64]| -> Vec<Complex64> {
            (0..w_hat.len())
                .map(|p| {
                    if p == 0 {
                        return Complex64::new(0.0, 0.0);
                    }
                    let a = this.diffusion[p];
                    ((1.0 - 0.5 * a) * w_hat[p] + this.dt * (this.forcing_hat[p] - adv[p])) / (1.0 + 0.5 * a)
                })
                .collect()
        };
        let predicted = advance(self, &n0);
        let n1 = self.advection(&predicted);
        let avg: Vec<Complex64> = n0.iter().zip(&n1).map(|(a, b)| 0.5 * (a + b)).collect();
        advance(self, &avg)
    }
}

/// Incompressible 2D Navier-Stokes in vorticity form,
/// `w_t + u . grad(w) = nu * lap(w) + f`, with the mean of `w` held at zero.
pub fn solve_ns_vorticity(
    init_w: &[f64],
    nu: f64,
    forcing: &Forcing,
    spec: &SolverSpec,
) -> Result<Trajectory, SolverError> {
    spec.validate()?;
    let n = spec.resolution;
    check_init(init_w, n * n)?;
    let grid = Periodic2d::new(n);
    let mut forcing_hat = grid.forward(&forcing.field(n));
    forcing_hat[0] = Complex64::new(0.0, 0.0);
    let diffusion = grid.k2.iter().map(|&k2| nu * k2 * spec.dt).collect();
    let mut stepper = NsStepper {
        grid,
        forcing_hat,
        diffusion,
        dt: spec.dt,
        max_cfl: 0.0,
    };
    let mut w_hat = stepper.grid.forward(init_w);
    w_hat[0] = Complex64::new(0.0, 0.0);

    let mut sink = FrameSink::new(spec.n_saves() * n * n);
    sink.push(&[&stepper.grid.inverse(&w_hat)]);
    for step in 1..=spec.n_steps {
        w_hat = stepper.step(&w_hat);
        if stepper.max_cfl > CFL_LIMIT {
            return Err(SolverError::Cfl {
                step,
                cfl: stepper.max_cfl,
            });
        }
        if step % spec.save_every == 0 {
            sink.push(&[&stepper.grid.inverse(&w_hat)]);
        }
    }
    let equation = Equation::NsVorticity { nu, forcing: *forcing };
    Ok(sink.finish(&equation, n, spec.dt_save(), vec![1; n * n]))
}
