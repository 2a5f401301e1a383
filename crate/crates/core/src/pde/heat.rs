use rustfft::num_complex::Complex64;

use super::spectral::Periodic2d;
use super::{check_init, Equation, FrameSink, SolverError, SolverSpec, Trajectory};

/// Heat equation `u_t = nu * lap(u)`.
///
/// On the full torus each mode is advanced exactly from the initial spectrum, so
/// saved frames carry no time-stepping error. With a rectangular mask the field
/// is stepped by `dt` and reset to zero outside the mask after every step.
pub fn solve_heat(init: &[f64], nu: f64, spec: &SolverSpec) -> Result<Trajectory, SolverError> {
    spec.validate()?;
    if nu < 0.0 {
        return Err(SolverError::InvalidSpec(format!("nu must be non-negative, got {nu}")));
    }
    let n = spec.resolution;
    check_init(init, n * n)?;
    let grid = Periodic2d::new(n);
    let rect = match spec.equation {
        Equation::Heat { mask, .. } => mask,
        _ => None,
    };
    let equation = Equation::Heat { nu, mask: rect };
    let mut sink = FrameSink::new(spec.n_saves() * n * n);

    match rect {
        None => {
            let u0 = grid.forward(init);
            sink.push(&[init]);
            for s in 1..spec.n_saves() {
                let t = s as f64 * spec.dt_save();
                let spectrum: Vec<Complex64> = u0
                    .iter()
                    .zip(&grid.k2)
                    .map(|(c, &k2)| c * (-nu * k2 * t).exp())
                    .collect();
                sink.push(&[&grid.inverse(&spectrum)]);
            }
            Ok(sink.finish(&equation, n, spec.dt_save(), vec![1; n * n]))
        }
        Some(rect) => {
            let mask = rect.to_mask(n);
            let decay: Vec<f64> = grid.k2.iter().map(|&k2| (-nu * k2 * spec.dt).exp()).collect();
            let mut u: Vec<f64> = init.iter().zip(&mask).map(|(&v, &m)| v * m as f64).collect();
            sink.push(&[&u]);
            for step in 1..=spec.n_steps {
                let mut spectrum = grid.forward(&u);
                for (c, d) in spectrum.iter_mut().zip(&decay) {
                    *c *= d;
                }
                u = grid.inverse(&spectrum);
                for (v, &m) in u.iter_mut().zip(&mask) {
                    if m == 0 {
                        *v = 0.0;
                    }
                }
                if step % spec.save_every == 0 {
                    sink.push(&[&u]);
                }
            }
            Ok(sink.finish(&equation, n, spec.dt_save(), mask))
        }
    }
}
