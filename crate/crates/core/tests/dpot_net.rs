use dpot::data::fourier_resample;
use dpot::io::{load_checkpoint, save_checkpoint};
use dpot::model::*;
use dpot::tensor::{grad_check_entries, Graph, Tensor};
use dpot::train::{masked_loss, LossKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        patch: 2,
        t_ctx: 3,
        c_in: 3,
        d_model: 8,
        heads: 2,
        layers: 2,
        d_ffn: 6,
        groups: 2,
        input_norm: false,
    }
}

/// Context with a mask channel of ones.
fn context(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut t = random(&[cfg.t_ctx, cfg.resolution, cfg.resolution, cfg.c_in], seed);
    for px in t.data_mut().chunks_exact_mut(cfg.c_in) {
        px[cfg.c_in - 1] = 1.0;
    }
    t
}

// ---- positional encoding ---------------------------------------------------

fn encode(ctx: &Tensor, pos: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(ctx.clone());
    let p = g.constant(pos.clone());
    let y = positional_encode(&mut g, x, p).unwrap();
    g.value(y).clone()
}

#[test]
fn zero_positional_map_leaves_frames_unchanged() {
    let ctx = random(&[2, 4, 4, 3], 1);
    assert_eq!(encode(&ctx, &Tensor::zeros(&[3, 3])), ctx);
}

#[test]
fn first_row_positional_map_adds_row_coordinate() {
    let ctx = Tensor::zeros(&[2, 4, 4, 3]);
    let mut pos = Tensor::zeros(&[3, 3]);
    for c in 0..3 {
        pos.set(&[0, c], 1.0);
    }
    let y = encode(&ctx, &pos);
    for t in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    assert_eq!(y.get(&[t, i, j, c]), i as f64 / 4.0);
                }
            }
        }
    }
}

#[test]
fn positional_encoding_matches_pixel_loop() {
    let (t, h, w, c) = (3, 4, 6, 2);
    let ctx = random(&[t, h, w, c], 2);
    let pos = random(&[3, c], 3);
    let y = encode(&ctx, &pos);
    for k in 0..t {
        let time = (k + 1) as f64 / t as f64;
        for i in 0..h {
            for j in 0..w {
                let coord = [i as f64 / h as f64, j as f64 / w as f64, time];
                for ch in 0..c {
                    let p: f64 = (0..3).map(|r| coord[r] * pos.get(&[r, ch])).sum();
                    let expected = ctx.get(&[k, i, j, ch]) + p;
                    assert!((y.get(&[k, i, j, ch]) - expected).abs() < 1e-12);
                }
            }
        }
    }
}

// ---- patch embedding -------------------------------------------------------

fn embed(frames: &Tensor, weight: &Tensor, bias: &Tensor, patch: usize) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = patch_embed(&mut g, x, w, b, patch).unwrap();
    g.value(y).clone()
}

#[test]
fn patch_grid_of_nano_is_eight_by_eight() {
    let y = embed(
        &random(&[1, 32, 32, 2], 4),
        &random(&[32, 5], 5),
        &Tensor::zeros(&[5]),
        4,
    );
    assert_eq!(y.shape(), &[1, 8, 8, 5]);
}

#[test]
fn zero_patch_kernel_gives_bias_everywhere() {
    let bias = random(&[5], 6);
    let y = embed(&random(&[2, 8, 8, 2], 7), &Tensor::zeros(&[8, 5]), &bias, 2);
    for tok in y.data().chunks_exact(5) {
        assert_eq!(tok, bias.data());
    }
}

#[test]
fn patch_embedding_matches_explicit_extraction() {
    let (t, h, w, c, p, d) = (2, 8, 12, 3, 4, 5);
    let frames = random(&[t, h, w, c], 8);
    let weight = random(&[p * p * c, d], 9);
    let bias = random(&[d], 10);
    let y = embed(&frames, &weight, &bias, p);
    assert_eq!(y.shape(), &[t, h / p, w / p, d]);
    for k in 0..t {
        for a in 0..h / p {
            for b in 0..w / p {
                for o in 0..d {
                    let mut acc = bias.get(&[o]);
                    for pi in 0..p {
                        for pj in 0..p {
                            for ch in 0..c {
                                let v = frames.get(&[k, a * p + pi, b * p + pj, ch]);
                                acc += v * weight.get(&[(pi * p + pj) * c + ch, o]);
                            }
                        }
                    }
                    assert!((y.get(&[k, a, b, o]) - acc).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn patch_that_does_not_divide_grid_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 6, 6, 1]));
    let w = g.constant(Tensor::zeros(&[16, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(patch_embed(&mut g, x, w, b, 4).is_err());
    assert!(ModelConfig {
        resolution: 30,
        ..ModelConfig::nano(2)
    }
    .validate()
    .is_err());
}

// ---- temporal aggregation --------------------------------------------------

fn aggregate(tokens: &Tensor, weight: &Tensor, gamma: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let z = g.constant(tokens.clone());
    let w = g.constant(weight.clone());
    let gm = g.constant(gamma.clone());
    let y = temporal_aggregate(&mut g, z, w, gm).unwrap();
    g.value(y).clone()
}

fn identity(d: usize, scale: f64) -> Vec<f64> {
    (0..d * d).map(|i| if i / d == i % d { scale } else { 0.0 }).collect()
}

#[test]
fn scaled_identity_with_zero_frequency_is_temporal_mean() {
    let (t, d) = (4, 3);
    let tokens = random(&[t, 2, 2, d], 11);
    let weight = Tensor::new(&[t, d, d], (0..t).flat_map(|_| identity(d, 1.0 / t as f64)).collect()).unwrap();
    let y = aggregate(&tokens, &weight, &Tensor::zeros(&[d]));
    for i in 0..2 {
        for j in 0..2 {
            for c in 0..d {
                let mean = (0..t).map(|k| tokens.get(&[k, i, j, c])).sum::<f64>() / t as f64;
                assert!((y.get(&[i, j, c]) - mean).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn single_frame_with_zero_frequency_is_plain_transform() {
    let d = 4;
    let tokens = random(&[1, 3, 2, d], 12);
    let weight = random(&[1, d, d], 13);
    let y = aggregate(&tokens, &weight, &Tensor::zeros(&[d]));
    for (row, out) in tokens.data().chunks_exact(d).zip(y.data().chunks_exact(d)) {
        for o in 0..d {
            let expected: f64 = (0..d).map(|i| row[i] * weight.get(&[0, i, o])).sum();
            assert!((out[o] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn aggregation_matches_complex_phase_sum() {
    let (t, n1, n2, d) = (5, 2, 3, 4);
    let tokens = random(&[t, n1, n2, d], 14);
    let weight = random(&[t, d, d], 15);
    let gamma = random(&[d], 16);
    let y = aggregate(&tokens, &weight, &gamma);
    for i in 0..n1 {
        for j in 0..n2 {
            for o in 0..d {
                // Real part of sum_k (z_k W_k)_o * exp(-i gamma_o t_k).
                let (mut re, mut im) = (0.0, 0.0);
                for k in 0..t {
                    let zw: f64 = (0..d).map(|c| tokens.get(&[k, i, j, c]) * weight.get(&[k, c, o])).sum();
                    let phase = -gamma.get(&[o]) * (k + 1) as f64 / t as f64;
                    re += zw * phase.cos();
                    im += zw * phase.sin();
                }
                assert!(im.is_finite());
                assert!((y.get(&[i, j, o]) - re).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn aggregation_rejects_wrong_frame_count() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3, 2, 2, 4]));
    let w = g.constant(Tensor::zeros(&[2, 4, 4]));
    let gm = g.constant(Tensor::zeros(&[4]));
    assert!(temporal_aggregate(&mut g, z, w, gm).is_err());
}

// ---- Fourier attention layer -----------------------------------------------

struct MixerParams {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl MixerParams {
    fn random(heads: usize, dh: usize, seed: u64) -> Self {
        Self {
            w1: random(&[heads, dh, dh], seed),
            b1: random(&[heads, dh], seed + 1),
            w2: random(&[heads, dh, dh], seed + 2),
            b2: random(&[heads, dh], seed + 3),
        }
    }

    fn bind(&self, g: &mut Graph) -> MixerVars {
        MixerVars {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

fn mix(z: &Tensor, p: &MixerParams, heads: usize, mask: Option<&Tensor>) -> Tensor {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let vars = p.bind(&mut g);
    let y = spectral_mix(&mut g, zv, &vars, heads, mask).unwrap();
    g.value(y).clone()
}

#[test]
fn zero_frequency_identity_mixer_is_mean_pooling() {
    let (n1, n2, heads, dh) = (6, 4, 2, 4);
    let d = heads * dh;
    let mut z = random(&[n1, n2, d], 17);
    // The identity construction passes the first half of each head's channels.
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        if (i % d) % dh >= dh / 2 {
            *v = 0.0;
        }
    }
    let (w1, w2) = identity_mixer_weights(heads, dh);
    let p = MixerParams {
        w1,
        w2,
        b1: Tensor::zeros(&[heads, dh]),
        b2: Tensor::zeros(&[heads, dh]),
    };
    let mask = mode_mask(n1, n2, &[(0, 0)]);
    let y = mix(&z, &p, heads, Some(&mask));
    for c in 0..d {
        let mean = z.data().iter().skip(c).step_by(d).sum::<f64>() / (n1 * n2) as f64;
        for px in 0..n1 * n2 {
            assert!((y.data()[px * d + c] - mean).abs() < 1e-10, "channel {c} pixel {px}");
        }
    }
}

#[test]
fn zero_mixer_reduces_layer_to_norm_and_ffn() {
    let (n1, n2, d, f, groups) = (4, 4, 6, 5, 3);
    let z = random(&[n1, n2, d], 18);
    let gamma = random(&[d], 19);
    let beta = random(&[d], 20);
    let (w1, b1, w2, b2) = (
        random(&[d, f], 21),
        random(&[f], 22),
        random(&[f, d], 23),
        random(&[d], 24),
    );
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let zero = MixerParams {
        w1: Tensor::zeros(&[2, 3, 3]),
        b1: Tensor::zeros(&[2, 3]),
        w2: Tensor::zeros(&[2, 3, 3]),
        b2: Tensor::zeros(&[2, 3]),
    };
    let vars = LayerVars {
        mixer: zero.bind(&mut g),
        norm_weight: g.constant(gamma.clone()),
        norm_bias: g.constant(beta.clone()),
        ffn: FfnVars {
            w1: g.constant(w1.clone()),
            b1: g.constant(b1.clone()),
            w2: g.constant(w2.clone()),
            b2: g.constant(b2.clone()),
        },
    };
    let y = fourier_attention_layer(&mut g, zv, &vars, 2, groups).unwrap();
    let y = g.value(y).clone();

    // Group norm over all positions of each channel group, then residual FFN.
    let cg = d / groups;
    let positions = n1 * n2;
    let mut normed = z.data().to_vec();
    for grp in 0..groups {
        let vals: Vec<f64> = (0..positions)
            .flat_map(|p| (0..cg).map(move |k| (p, grp * cg + k)))
            .map(|(p, c)| z.data()[p * d + c])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for p in 0..positions {
            for k in 0..cg {
                let c = grp * cg + k;
                let x = (z.data()[p * d + c] - mean) / (var + 1e-5).sqrt();
                normed[p * d + c] = x * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    let gelu = |x: f64| x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    for p in 0..positions {
        let x = &normed[p * d..(p + 1) * d];
        let hidden: Vec<f64> = (0..f)
            .map(|j| gelu(b1.data()[j] + (0..d).map(|i| x[i] * w1.get(&[i, j])).sum::<f64>()))
            .collect();
        for o in 0..d {
            let ffn = b2.data()[o] + (0..f).map(|j| hidden[j] * w2.get(&[j, o])).sum::<f64>();
            assert!((y.data()[p * d + o] - (x[o] + ffn)).abs() < 1e-10);
        }
    }
}

/// Single-head weights whose blocks are the per-head weights.
fn block_diagonal(p: &MixerParams, heads: usize, dh: usize) -> MixerParams {
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
    MixerParams {
        w1,
        w2,
        b1: p.b1.clone().reshape(&[1, d]).unwrap(),
        b2: p.b2.clone().reshape(&[1, d]).unwrap(),
    }
}

fn head_split_gap(heads: usize, dh: usize, n: usize, seed: u64) -> f64 {
    let z = random(&[n, n, heads * dh], seed);
    let p = MixerParams::random(heads, dh, seed + 10);
    let split = mix(&z, &p, heads, None);
    let single = mix(&z, &block_diagonal(&p, heads, dh), 1, None);
    max_diff(split.data(), single.data())
}

#[test]
fn head_split_equals_block_diagonal_single_head() {
    for heads in [2, 4] {
        assert!(head_split_gap(heads, 4, 6, 30 + heads as u64) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn head_split_holds_for_every_divisor(heads in 1usize..5, dh in 1usize..5, n in 2usize..6, seed in 0u64..1000) {
        prop_assert!(head_split_gap(heads, dh, n, seed) < 1e-10);
    }
}

#[test]
fn mixer_commutes_with_band_limited_upsampling() {
    let (n, big, heads, dh) = (8, 16, 2, 3);
    let d = heads * dh;
    // Band-limited token field: modes |k| <= 2 only.
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut z = Tensor::zeros(&[n, n, d]);
    for c in 0..d {
        let coef: Vec<(i32, i32, f64, f64)> = (-2..=2)
            .flat_map(|a| (-2..=2).map(move |b| (a, b)))
            .map(|(a, b)| (a, b, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        for i in 0..n {
            for j in 0..n {
                let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let y = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                let v: f64 = coef
                    .iter()
                    .map(|&(a, b, s, q)| {
                        s * (a as f64 * x + b as f64 * y).cos() + q * (a as f64 * x + b as f64 * y).sin()
                    })
                    .sum();
                z.set(&[i, j, c], v);
            }
        }
    }
    let upsample = |t: &Tensor, from: usize, to: usize| -> Tensor {
        let mut out = Tensor::zeros(&[to, to, d]);
        for c in 0..d {
            let field: Vec<f64> = t.data().iter().skip(c).step_by(d).copied().collect();
            for (p, v) in fourier_resample(&field, (from, from), (to, to)).into_iter().enumerate() {
                out.data_mut()[p * d + c] = v;
            }
        }
        out
    };
    let mut p = MixerParams::random(heads, dh, 41);
    p.b1 = Tensor::zeros(&[heads, dh]);
    p.b2 = Tensor::zeros(&[heads, dh]);
    let coarse_then_up = upsample(&mix(&z, &p, heads, None), n, big);
    let up_then_mix = mix(&upsample(&z, n, big), &p, heads, None);
    let gap = max_diff(coarse_then_up.data(), up_then_mix.data());
    assert!(gap < 1e-6, "gap {gap}");
}

// ---- whole model -----------------------------------------------------------

#[test]
fn closed_form_parameter_count_matches_enumeration() {
    for cfg in [
        ModelConfig::nano(2),
        ModelConfig::nano(5),
        ModelConfig::tiny(5),
        small_config(),
    ] {
        let m = DpotModel::zeros(cfg.clone()).unwrap();
        let enumerated: usize = m.params.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(enumerated, cfg.param_count(), "{cfg:?}");
    }
    // Tiny widths land in the millions, dominated by the per-frame transforms.
    let tiny = ModelConfig::tiny(5).param_count();
    assert!((5_000_000..8_000_000).contains(&tiny), "{tiny}");
}

#[test]
fn zero_parameters_predict_zero() {
    let cfg = small_config();
    let y = DpotModel::zeros(cfg.clone())
        .unwrap()
        .predict(&context(&cfg, 50))
        .unwrap();
    assert_eq!(y.shape(), &[8, 8, 2]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn nano_forward_has_expected_shape() {
    let cfg = ModelConfig::nano(2);
    let y = DpotModel::new(cfg.clone(), 1)
        .unwrap()
        .predict(&context(&cfg, 51))
        .unwrap();
    assert_eq!(y.shape(), &[32, 32, 1]);
    assert!(y.all_finite());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let a = DpotModel::new(cfg.clone(), 3).unwrap();
    let b = DpotModel::new(cfg.clone(), 3).unwrap();
    assert_eq!(a, b);
    let ctx = context(&cfg, 52);
    let (ya, yb) = (a.predict(&ctx).unwrap(), b.predict(&ctx).unwrap());
    assert!(ya.data().iter().zip(yb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a, DpotModel::new(cfg, 4).unwrap());
}

#[test]
fn wrong_input_shape_reports_expected_and_actual() {
    let cfg = small_config();
    let m = DpotModel::new(cfg, 3).unwrap();
    let err = m.predict(&Tensor::zeros(&[3, 8, 8, 2])).unwrap_err().to_string();
    assert!(err.contains("[3, 8, 8, 2]") && err.contains("[3, 8, 8, 3]"), "{err}");
}

#[test]
fn input_scaling_makes_prediction_affine_equivariant() {
    let mut cfg = small_config();
    cfg.input_norm = true;
    let m = DpotModel::new(cfg.clone(), 5).unwrap();
    let ctx = context(&cfg, 53);
    let mut shifted = ctx.clone();
    for px in shifted.data_mut().chunks_exact_mut(cfg.c_in) {
        for v in &mut px[..cfg.c_in - 1] {
            *v = 3.0 * *v + 2.0;
        }
    }
    let y = m.predict(&ctx).unwrap();
    let ys = m.predict(&shifted).unwrap();
    let expected: Vec<f64> = y.data().iter().map(|v| 3.0 * v + 2.0).collect();
    assert!(max_diff(&expected, ys.data()) < 1e-9);
}

/// Gradient of the relative masked loss for a randomly initialized model on a
/// random context, checked on a spread of entries of every parameter.
fn model_grad_check(cfg: &ModelConfig, per_tensor: usize, seed: u64) -> f64 {
    let model = DpotModel::new(cfg.clone(), seed).unwrap();
    let ctx = context(cfg, seed + 1);
    let mut target = random(&[cfg.resolution, cfg.resolution, cfg.c_in], seed + 2);
    for px in target.data_mut().chunks_exact_mut(cfg.c_in) {
        px[cfg.c_in - 1] = 1.0;
    }
    let valid = vec![true; cfg.c_out()];
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let entries: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            if p.numel() <= per_tensor {
                (0..p.numel()).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..p.numel())).collect()
            }
        })
        .collect();
    let report = grad_check_entries(
        |g, vars| {
            let bound = bind_params(&model, g, vars);
            let x = g.constant(ctx.clone());
            let y = model.forward_graph(g, &bound, x).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            masked_loss(g, y, &target, &valid, LossKind::Relative)
        },
        &params,
        1e-5,
        &entries,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn small_model_gradients_match_finite_differences_everywhere() {
    let err = model_grad_check(&small_config(), usize::MAX, 60);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn nano_gradients_match_finite_differences_on_sampled_entries() {
    let err = model_grad_check(&ModelConfig::nano(2), 6, 61);
    assert!(err <= 1e-4, "max relative error {err}");
}

// ---- resolution change -----------------------------------------------------

#[test]
fn native_grid_needs_no_resampling() {
    let cfg = small_config();
    let m = DpotModel::new(cfg.clone(), 7).unwrap();
    let ctx = context(&cfg, 70);
    let y = m.predict(&ctx).unwrap();
    for mode in [ResolutionMode::Signal, ResolutionMode::Kernel] {
        assert_eq!(m.predict_at(&ctx, mode).unwrap(), y);
    }
    assert_eq!(m.with_patch_kernels(cfg.patch).unwrap(), m);
}

#[test]
fn kernel_resampling_is_exact_for_linear_fields() {
    let cfg = small_config();
    let m = DpotModel::new(cfg.clone(), 8).unwrap();
    // Fields linear in the normalized coordinates, sampled on two grids.
    let linear = |res: usize| {
        Tensor::from_fn(&[cfg.t_ctx, res, res, cfg.c_in], |i| {
            let c = i % cfg.c_in;
            let px = i / cfg.c_in;
            let (k, y, x) = (px / (res * res), (px / res) % res, px % res);
            let (y, x) = (y as f64 / res as f64, x as f64 / res as f64);
            if c == cfg.c_in - 1 {
                1.0
            } else {
                0.3 * k as f64 + 0.7 * x - 1.1 * y + 0.2
            }
        })
    };
    let coarse = m.predict(&linear(8)).unwrap();
    let fine = m.predict_at(&linear(16), ResolutionMode::Kernel).unwrap();
    assert_eq!(fine.shape(), &[16, 16, 2]);
    // Identical tokens, and the refined decoder reproduces the coarse pixels
    // at the positions both grids share.
    for i in 0..8 {
        for j in 0..8 {
            for c in 0..2 {
                let (a, b) = (coarse.get(&[i, j, c]), fine.get(&[2 * i, 2 * j, c]));
                assert!((a - b).abs() < 1e-10, "pixel ({i}, {j}): {a} vs {b}");
            }
        }
    }
}

#[test]
fn kernel_resampling_round_trips_through_a_finer_patch() {
    let m = DpotModel::new(small_config(), 12).unwrap();
    let back = m.with_patch_kernels(4).unwrap().with_patch_kernels(2).unwrap();
    for ((k, a), (_, b)) in m.params.iter().zip(&back.params) {
        assert!(max_diff(a.data(), b.data()) < 1e-10, "{k}");
    }
}

#[test]
fn signal_resampling_runs_at_non_power_of_two_grid() {
    let cfg = ModelConfig {
        resolution: 8,
        patch: 4,
        ..small_config()
    };
    let m = DpotModel::new(cfg.clone(), 9).unwrap();
    let ctx = context(
        &ModelConfig {
            resolution: 12,
            ..cfg.clone()
        },
        71,
    );
    let y = m.predict_at(&ctx, ResolutionMode::Signal).unwrap();
    assert_eq!(y.shape(), &[12, 12, 2]);
    let y = m.predict_at(&ctx, ResolutionMode::Kernel).unwrap();
    assert_eq!(y.shape(), &[12, 12, 2]);
}

// ---- transfer and checkpoints ----------------------------------------------

#[test]
fn same_config_transfer_copies_everything() {
    let cfg = small_config();
    let src = DpotModel::new(cfg.clone(), 10).unwrap();
    let (dst, report) = transfer_weights(&src.to_checkpoint(), &cfg, 99).unwrap();
    assert!(report.reinitialized.is_empty());
    assert_eq!(report.copied.len(), src.params.len());
    assert_eq!(dst, src);
    let (_, blob_a) = src.to_checkpoint().encode();
    let (_, blob_b) = dst.to_checkpoint().encode();
    assert_eq!(blob_a, blob_b);
}

#[test]
fn transfer_to_finer_grid_copies_layers_only() {
    let cfg = ModelConfig::nano(2);
    let src = DpotModel::new(cfg.clone(), 11).unwrap();
    let target = ModelConfig {
        resolution: 64,
        ..cfg.clone()
    };
    let (dst, report) = transfer_weights(&src.to_checkpoint(), &target, 12).unwrap();
    let layer_keys = src.params.iter().filter(|(k, _)| is_layer_param(k)).count();
    assert_eq!(report.copied.len(), layer_keys);
    assert_eq!(report.copied.len(), cfg.layers * 10);
    assert_eq!(report.reinitialized.len(), src.params.len() - layer_keys);
    assert!(report.copied.iter().all(|k| is_layer_param(k)));
    // Closed form: L (h (2 (d/h)^2 + 2 d/h) + 2 d + 2 d d_ffn + d + d_ffn).
    let (l, h, d, f) = (cfg.layers, cfg.heads, cfg.d_model, cfg.d_ffn);
    let closed = l * (h * (2 * (d / h).pow(2) + 2 * (d / h)) + 2 * d + 2 * d * f + d + f);
    assert_eq!(report.copied_param_count(&dst), closed);
    for k in &report.copied {
        assert_eq!(dst.param(k), src.param(k));
    }
    let y = dst.predict(&context(&target, 72)).unwrap();
    assert_eq!(y.shape(), &[64, 64, 1]);
}

#[test]
fn transfer_rejects_different_width() {
    let src = DpotModel::new(ModelConfig::nano(2), 13).unwrap();
    let target = ModelConfig {
        d_model: 32,
        d_ffn: 32,
        ..ModelConfig::nano(2)
    };
    let err = transfer_weights(&src.to_checkpoint(), &target, 0).unwrap_err();
    assert!(matches!(err, ModelError::Incompatible { .. }), "{err}");
    let target = ModelConfig {
        heads: 8,
        ..ModelConfig::nano(2)
    };
    assert!(transfer_weights(&src.to_checkpoint(), &target, 0).is_err());
}

#[test]
fn checkpoint_round_trip_predicts_bit_identically() {
    let cfg = small_config();
    let m = DpotModel::new(cfg.clone(), 14).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m.to_checkpoint(), dir.path()).unwrap();
    let loaded = DpotModel::from_checkpoint(&load_checkpoint(dir.path()).unwrap()).unwrap();
    let ctx = context(&cfg, 73);
    let (a, b) = (m.predict(&ctx).unwrap(), loaded.predict(&ctx).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loading_into_mismatched_width_names_both_configs() {
    let m = DpotModel::new(small_config(), 15).unwrap();
    let other = ModelConfig {
        d_model: 16,
        ..small_config()
    };
    let err = DpotModel::from_checkpoint_expecting(&m.to_checkpoint(), &other)
        .unwrap_err()
        .to_string();
    assert!(err.contains("\"d_model\":16") && err.contains("\"d_model\":8"), "{err}");
}

#[test]
fn checkpoint_missing_tensor_is_rejected() {
    let m = DpotModel::new(small_config(), 16).unwrap();
    let mut ckpt = m.to_checkpoint();
    ckpt.params.retain(|(k, _)| k != "agg.gamma");
    let err = DpotModel::from_checkpoint(&ckpt).unwrap_err();
    assert!(matches!(err, ModelError::Parameter { ref key, .. } if key == "agg.gamma"));
}
