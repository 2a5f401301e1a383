//! Invariant suite shared by the `verify` command and the acceptance tests.
//!
//! Every check compares a production code path against an independent
//! reference (direct DFT sums, explicit loops, closed-form solutions).

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BalancedSampler, SamplerSpec, WindowRange};
use crate::io::{load_checkpoint, save_checkpoint, DatasetMeta, TrajectoryDataset};
use crate::model::{
    bind_params, identity_mixer_weights, mode_mask, spectral_mix, DpotModel, MixerVars, ModelConfig, ModelError,
};
use crate::pde::{
    enstrophy, gaussian_random_field, kinetic_energy, solve_heat, solve_ns_vorticity, Equation, Forcing, GrfSpec,
    SolverSpec,
};
use crate::tensor::{grad_check_entries, Graph, Tensor};
use crate::train::{masked_loss, LossKind};

const GOLDEN: &[u8] = include_bytes!("../tests/data/golden_v1.dpot");

/// Result of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub outcome: Outcome,
    pub seconds: f64,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.outcome.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {} ({:.1}s): {}",
            self.name, self.seconds, self.outcome.detail
        )
    }
}

pub type CheckFn = fn() -> Outcome;

/// Every check in execution order.
pub fn checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("fft", check_fft as CheckFn),
        ("pooling", check_pooling),
        ("heads", check_heads),
        ("sampler", check_sampler),
        ("persistence", check_persistence),
        ("solver", check_solver),
        ("gradient", check_gradients),
    ]
}

pub fn run_check(name: &'static str, check: CheckFn) -> CheckReport {
    let start = Instant::now();
    let outcome = check();
    CheckReport {
        name,
        outcome,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the checks whose names contain any of `filters` (all when empty).
pub fn run_suite(filters: &[String]) -> Vec<CheckReport> {
    checks()
        .into_iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .map(|(name, check)| run_check(name, check))
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

// ---- FFT -------------------------------------------------------------------

/// Direct quadratic DFT of an interleaved complex `[h, w]` field, unitary scaling.
fn dft_reference(x: &[f64], h: usize, w: usize, sign: f64) -> Vec<f64> {
    let s = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![0.0; 2 * h * w];
    for k1 in 0..h {
        for k2 in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for j1 in 0..h {
                for j2 in 0..w {
                    let phase = sign * 2.0 * PI * ((k1 * j1) as f64 / h as f64 + (k2 * j2) as f64 / w as f64);
                    let (c, sn) = (phase.cos(), phase.sin());
                    let (xr, xi) = (x[2 * (j1 * w + j2)], x[2 * (j1 * w + j2) + 1]);
                    re += xr * c - xi * sn;
                    im += xr * sn + xi * c;
                }
            }
            out[2 * (k1 * w + k2)] = re * s;
            out[2 * (k1 * w + k2) + 1] = im * s;
        }
    }
    out
}

fn transform(x: &Tensor, inverse: bool) -> crate::tensor::Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = if inverse { g.ifft2(v)? } else { g.fft2(v)? };
    Ok(g.value(y).clone())
}

fn fft_errors(n: usize, rng: &mut ChaCha8Rng) -> crate::tensor::Result<[f64; 4]> {
    let complex =
        |rng: &mut ChaCha8Rng| Tensor::complex(&[n, n], (0..2 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (x, y) = (complex(rng)?, complex(rng)?);
    let fx = transform(&x, false)?;
    let unitarity = (fx.norm() - x.norm()).abs() / x.norm();
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let combo = Tensor::complex(
        &[n, n],
        x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
    )?;
    let fy = transform(&y, false)?;
    let expected: Vec<f64> = fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + b * q).collect();
    let linearity = max_diff(transform(&combo, false)?.data(), &expected);
    let round_trip = max_diff(transform(&fx, true)?.data(), x.data());
    let forward = max_diff(fx.data(), &dft_reference(x.data(), n, n, -1.0));
    let inverse = max_diff(transform(&x, true)?.data(), &dft_reference(x.data(), n, n, 1.0));
    Ok([unitarity, linearity, round_trip, forward.max(inverse)])
}

/// Unitarity, linearity, round trip and agreement with the direct DFT on 8x8 and 32x32.
pub fn check_fft() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    for n in [8, 32] {
        match fft_errors(n, &mut rng) {
            Ok(errs) => {
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(e);
                }
            }
            Err(e) => return Outcome::error(e),
        }
    }
    let passed = worst.iter().all(|&e| e <= 1e-10);
    Outcome::new(
        passed,
        format!(
            "unitarity {:.1e}, linearity {:.1e}, round trip {:.1e}, direct DFT {:.1e} (tol 1e-10)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---- mixer -----------------------------------------------------------------

struct MixerWeights {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn mix(z: &Tensor, p: &MixerWeights, heads: usize, mask: Option<&Tensor>) -> crate::tensor::Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let vars = MixerVars {
        w1: g.constant(p.w1.clone()),
        b1: g.constant(p.b1.clone()),
        w2: g.constant(p.w2.clone()),
        b2: g.constant(p.b2.clone()),
    };
    let y = spectral_mix(&mut g, zv, &vars, heads, mask)?;
    Ok(g.value(y).clone())
}

/// Keeping only the zero mode with an identity channel map turns the mixer
/// into spatial mean pooling.
pub fn check_pooling() -> Outcome {
    let (n1, n2, heads, dh) = (8, 8, 4, 4);
    let d = heads * dh;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut z = random(&[n1, n2, d], &mut rng);
    // The identity construction carries the first half of each head's channels.
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        if (i % d) % dh >= dh / 2 {
            *v = 0.0;
        }
    }
    let (w1, w2) = identity_mixer_weights(heads, dh);
    let p = MixerWeights {
        w1,
        w2,
        b1: Tensor::zeros(&[heads, dh]),
        b2: Tensor::zeros(&[heads, dh]),
    };
    let y = match mix(&z, &p, heads, Some(&mode_mask(n1, n2, &[(0, 0)]))) {
        Ok(y) => y,
        Err(e) => return Outcome::error(e),
    };
    let mut err = 0.0f64;
    for c in 0..d {
        let mean = z.data().iter().skip(c).step_by(d).sum::<f64>() / (n1 * n2) as f64;
        for px in 0..n1 * n2 {
            err = err.max((y.data()[px * d + c] - mean).abs());
        }
    }
    Outcome::new(
        err <= 1e-10,
        format!("max deviation from mean pooling {err:.1e} (tol 1e-10)"),
    )
}

fn block_diagonal(p: &MixerWeights, heads: usize, dh: usize) -> crate::tensor::Result<MixerWeights> {
    let d = heads * dh;
    let mut w1 = Tensor::zeros(&[1, d, d]);
    let mut w2 = Tensor::zeros(&[1, d, d]);
    for h in 0..heads {
        for i in 0..dh {
            for j in 0..dh {
                w1.set(&[0, h * dh + i, h * dh + j], p.w1.get(&[h, i, j]));
                w2.set(&[0, h * dh + i, h * dh + j], p.w2.get(&[h, i, j]));
            }
        }
    }
    Ok(MixerWeights {
        w1,
        w2,
        b1: p.b1.clone().reshape(&[1, d])?,
        b2: p.b2.clone().reshape(&[1, d])?,
    })
}

/// A multi-head mixer equals one head with block-diagonal weights.
pub fn check_heads() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut gaps = Vec::new();
    for heads in [2, 4] {
        let dh = 4;
        let z = random(&[8, 8, heads * dh], &mut rng);
        let p = MixerWeights {
            w1: random(&[heads, dh, dh], &mut rng),
            b1: random(&[heads, dh], &mut rng),
            w2: random(&[heads, dh, dh], &mut rng),
            b2: random(&[heads, dh], &mut rng),
        };
        let gap = block_diagonal(&p, heads, dh).and_then(|single| {
            Ok(max_diff(
                mix(&z, &p, heads, None)?.data(),
                mix(&z, &single, 1, None)?.data(),
            ))
        });
        match gap {
            Ok(g) => gaps.push((heads, g)),
            Err(e) => return Outcome::error(e),
        }
    }
    let passed = gaps.iter().all(|&(_, g)| g <= 1e-10);
    let detail = gaps
        .iter()
        .map(|(h, g)| format!("h={h}: {g:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(passed, format!("{detail} (tol 1e-10)"))
}

// ---- sampler ---------------------------------------------------------------

/// Dataset frequencies over 1e5 draws lie within the 99% binomial bound.
pub fn check_sampler() -> Outcome {
    const DRAWS: usize = 100_000;
    const Z99: f64 = 2.5758;
    let mut parts = Vec::new();
    let mut passed = true;
    for weights in [vec![1.0, 1.0], vec![3.0, 1.0]] {
        let ranges = vec![
            WindowRange {
                trajectories: 100,
                starts: 0..=10,
            },
            WindowRange {
                trajectories: 10,
                starts: 0..=10,
            },
        ];
        let spec = SamplerSpec {
            weights: weights.clone(),
            seed: 104,
        };
        let sampler = match BalancedSampler::new(ranges, &spec) {
            Ok(s) => s,
            Err(e) => return Outcome::error(e),
        };
        let hits = sampler.stream(0).take(DRAWS).filter(|d| d.dataset == 0).count();
        let q = spec.probabilities()[0];
        let freq = hits as f64 / DRAWS as f64;
        let bound = Z99 * (q * (1.0 - q) / DRAWS as f64).sqrt();
        passed &= (freq - q).abs() <= bound;
        parts.push(format!("w={weights:?}: {freq:.4} vs {q:.4} (bound {bound:.4})"));
    }
    Outcome::new(passed, parts.join(", "))
}

// ---- persistence -----------------------------------------------------------

fn random_dataset(rng: &mut ChaCha8Rng) -> TrajectoryDataset {
    let (n, t, h, c) = (3, 4, 8, 2);
    TrajectoryDataset {
        n,
        t,
        h,
        w: h,
        c,
        values: (0..n * t * h * h * c).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
        mask: (0..n * h * h).map(|_| rng.random_range(0..2u8)).collect(),
        meta: DatasetMeta {
            pde: "diffusion_reaction".into(),
            coefficients: [("du".to_string(), 1e-2), ("dv".to_string(), 5e-2)]
                .into_iter()
                .collect(),
            dt_save: 0.1,
            channel_names: vec!["u".into(), "v".into()],
            mean: vec![0.1, -0.2],
            std: vec![1.5, 0.5],
            seed: 7,
        },
    }
}

fn persistence() -> Result<String, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let dir = std::env::temp_dir().join(format!("dpot-verify-{}-{}", std::process::id(), rng.random::<u64>()));
    std::fs::create_dir_all(&dir).map_err(|e| err(&e))?;
    let result = (|| {
        let ds = random_dataset(&mut rng);
        let path = dir.join("d.dpot");
        crate::io::write_dataset(&ds, &path).map_err(|e| err(&e))?;
        let back = crate::io::read_dataset(&path).map_err(|e| err(&e))?;
        let bitwise = back
            .values
            .iter()
            .zip(&ds.values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !bitwise || back != ds {
            return Err("dataset round trip differs".into());
        }
        let golden = TrajectoryDataset::from_bytes(GOLDEN).map_err(|e| err(&e))?;
        if golden.to_bytes().map_err(|e| err(&e))? != GOLDEN {
            return Err("golden file does not re-encode to the same bytes".into());
        }

        let cfg = ModelConfig {
            resolution: 16,
            t_ctx: 3,
            ..ModelConfig::nano(2)
        };
        let model = DpotModel::new(cfg.clone(), 9).map_err(|e| err(&e))?;
        let ctx = Tensor::from_fn(&[cfg.t_ctx, 16, 16, cfg.c_in], |_| rng.random_range(-1.0..1.0));
        save_checkpoint(&model.to_checkpoint(), dir.join("c1")).map_err(|e| err(&e))?;
        let loaded = load_checkpoint(dir.join("c1")).map_err(|e| err(&e))?;
        save_checkpoint(&loaded, dir.join("c2")).map_err(|e| err(&e))?;
        let blob = |d: &str| std::fs::read(dir.join(d).join("tensors.bin")).map_err(|e| err(&e));
        if blob("c1")? != blob("c2")? {
            return Err("checkpoint blob changes on re-save".into());
        }
        let restored = DpotModel::from_checkpoint(&loaded).map_err(|e| err(&e))?;
        let (a, b) = (
            model.predict(&ctx).map_err(|e| err(&e))?,
            restored.predict(&ctx).map_err(|e| err(&e))?,
        );
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err("restored model predicts differently".into());
        }
        Ok("dataset, golden file, checkpoint blob and predictions are bitwise stable".to_string())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

pub fn check_persistence() -> Outcome {
    match persistence() {
        Ok(detail) => Outcome::new(true, detail),
        Err(detail) => Outcome::new(false, detail),
    }
}

// ---- solvers ---------------------------------------------------------------

fn sample(n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let dx = 2.0 * PI / n as f64;
    (0..n * n)
        .map(|p| f((p / n) as f64 * dx, (p % n) as f64 * dx))
        .collect()
}

fn solver_spec(equation: Equation, n: usize, dt: f64, n_steps: usize) -> SolverSpec {
    SolverSpec {
        equation,
        resolution: n,
        dt,
        n_steps,
        save_every: n_steps,
        init: GrfSpec::default(),
        seed: 0,
    }
}

fn solver_errors() -> Result<[f64; 4], crate::pde::SolverError> {
    let nu = 0.1;
    let init = sample(32, |x, y| x.sin() * y.sin());
    let heat = solve_heat(&init, nu, &solver_spec(Equation::Heat { nu, mask: None }, 32, 0.1, 10))?;
    let exact: Vec<f64> = init.iter().map(|v| (-2.0 * nu * 1.0f64).exp() * v).collect();
    let heat_err = max_diff(heat.frame(1), &exact) / max_abs(&exact);

    let nu = 0.05;
    let init = sample(64, |x, y| 2.0 * x.cos() * y.cos());
    let eq = Equation::NsVorticity {
        nu,
        forcing: Forcing::None,
    };
    let tg = solve_ns_vorticity(&init, nu, &Forcing::None, &solver_spec(eq, 64, 1e-3, 500))?;
    let exact: Vec<f64> = init.iter().map(|v| (-2.0 * nu * 0.5f64).exp() * v).collect();
    let tg_err = max_diff(tg.frame(1), &exact) / max_abs(&exact);

    let init = gaussian_random_field(64, &GrfSpec::default(), 21);
    let eq = Equation::NsVorticity {
        nu: 0.0,
        forcing: Forcing::None,
    };
    let inv = solve_ns_vorticity(&init, 0.0, &Forcing::None, &solver_spec(eq, 64, 1e-3, 100))?;
    let drift = |f: fn(&[f64]) -> f64| ((f(inv.frame(1)) - f(inv.frame(0))) / f(inv.frame(0))).abs();
    Ok([heat_err, tg_err, drift(kinetic_energy), drift(enstrophy)])
}

/// Heat eigenfunction decay, Taylor-Green decay and inviscid conservation.
pub fn check_solver() -> Outcome {
    match solver_errors() {
        Ok([heat, tg, energy, enst]) => Outcome::new(
            heat <= 1e-10 && tg <= 1e-4 && energy <= 1e-3 && enst <= 1e-3,
            format!(
                "heat {heat:.1e} (tol 1e-10), Taylor-Green {tg:.1e} (tol 1e-4), inviscid energy {energy:.1e} \
                 and enstrophy {enst:.1e} drift (tol 1e-3)"
            ),
        ),
        Err(e) => Outcome::error(e),
    }
}

// ---- gradients -------------------------------------------------------------

/// Balances truncation and round-off for the loss magnitudes seen here.
const FD_STEP: f64 = 1e-4;

/// Nano widths on a 16x16 grid with four context frames.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        t_ctx: 4,
        ..ModelConfig::nano(2)
    }
}

/// Worst relative error between reverse-mode and central-difference gradients
/// of the relative masked loss. `per_tensor = None` checks every entry.
pub fn model_gradient_error(cfg: &ModelConfig, per_tensor: Option<usize>, seed: u64) -> Result<f64, ModelError> {
    let model = DpotModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let ctx = random(&[cfg.t_ctx, cfg.resolution, cfg.resolution, cfg.c_in], &mut rng);
    let mut target = random(&[cfg.resolution, cfg.resolution, cfg.c_in], &mut rng);
    for px in target.data_mut().chunks_exact_mut(cfg.c_in) {
        px[cfg.c_in - 1] = 1.0;
    }
    let valid = vec![true; cfg.c_out()];
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let entries: Vec<Vec<usize>> = params
        .iter()
        .map(|p| match per_tensor {
            Some(k) if p.numel() > k => (0..k).map(|_| rng.random_range(0..p.numel())).collect(),
            _ => (0..p.numel()).collect(),
        })
        .collect();
    let report = grad_check_entries(
        |g, vars| {
            let bound = bind_params(&model, g, vars);
            let x = g.constant(ctx.clone());
            let y = model.forward_graph(g, &bound, x).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => crate::tensor::TensorError::Invalid {
                    op: "forward",
                    detail: other.to_string(),
                },
            })?;
            masked_loss(g, y, &target, &valid, LossKind::Relative)
        },
        &params,
        FD_STEP,
        &entries,
    )?;
    Ok(report.max_rel_error)
}

/// Every parameter entry of [`gradient_check_config`], plus a sampled sweep of
/// the full nano model.
pub fn check_gradients() -> Outcome {
    let full = model_gradient_error(&gradient_check_config(), None, 106);
    let sampled = model_gradient_error(&ModelConfig::nano(2), Some(8), 107);
    match (full, sampled) {
        (Ok(a), Ok(b)) => Outcome::new(
            a <= 1e-4 && b <= 1e-4,
            format!("all entries (16x16, T=4) {a:.1e}, sampled full nano {b:.1e} (tol 1e-4)"),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::error(e),
    }
}
