//! Fourier-attention operator: positional encoding, patch embedding, temporal
//! aggregation, a stack of frequency-domain token mixers and a linear decoder.

mod config;
pub mod layers;

pub use config::ModelConfig;
pub use layers::{
    channel_ffn, decode, fourier_attention_layer, mode_mask, patch_embed, positional_encode, spectral_mix,
    temporal_aggregate, FfnVars, LayerVars, MixerVars,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::fourier_resample;
use crate::io::Checkpoint;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {actual:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("incompatible configs: expected {expected}, found {found}")]
    Incompatible { expected: String, found: String },
    #[error("checkpoint parameter {key}: {detail}")]
    Parameter { key: String, detail: String },
    #[error("checkpoint config: {0}")]
    ConfigJson(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a model trained at one grid is evaluated at another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionMode {
    /// Resample the input to the native grid and the output back.
    Signal,
    /// Keep the token grid fixed and resample patch and decoder kernels to
    /// `patch * H' / H` pixels.
    Kernel,
}

/// Variables of every parameter, bound into one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub pos: Var,
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub agg_weight: Var,
    pub agg_gamma: Var,
    pub layers: Vec<LayerVars>,
    pub decoder_weight: Var,
    pub decoder_bias: Var,
    /// All variables in parameter order.
    pub vars: Vec<Var>,
}

/// Per-channel shift and scale of the physical channels of one context.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScale {
    const FLOOR: f64 = 1e-8;

    /// Statistics over all frames at mask-interior pixels. Channels with no
    /// spread keep unit scale.
    pub fn of(context: &Tensor) -> Self {
        let c = *context.shape().last().expect("context has channels") - 1;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for px in context.data().chunks_exact(c + 1) {
            if px[c] == 0.0 {
                continue;
            }
            count += 1;
            for ch in 0..c {
                sum[ch] += px[ch];
                sq[ch] += px[ch] * px[ch];
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s > Self::FLOOR {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, context: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = context.clone();
        for px in out.data_mut().chunks_exact_mut(c + 1) {
            for ch in 0..c {
                px[ch] = (px[ch] - self.mean[ch]) / self.std[ch];
            }
        }
        out
    }
}

/// Anything that maps a `[T, H, W, C_in]` context to a `[H, W, C_out]` frame.
pub trait Predictor {
    fn t_ctx(&self) -> usize;
    fn predict(&self, context: &Tensor) -> Result<Tensor, ModelError>;
}

impl Predictor for DpotModel {
    fn t_ctx(&self) -> usize {
        self.config.t_ctx
    }

    fn predict(&self, context: &Tensor) -> Result<Tensor, ModelError> {
        DpotModel::predict(self, context)
    }
}

/// A model evaluated on grids other than its native one.
#[derive(Debug, Clone, Copy)]
pub struct AtResolution<'a> {
    pub model: &'a DpotModel,
    pub mode: ResolutionMode,
}

impl Predictor for AtResolution<'_> {
    fn t_ctx(&self) -> usize {
        self.model.config.t_ctx
    }

    fn predict(&self, context: &Tensor) -> Result<Tensor, ModelError> {
        self.model.predict_at(context, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpotModel {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

/// Outcome of [`transfer_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
}

impl TransferReport {
    pub fn copied_param_count(&self, model: &DpotModel) -> usize {
        self.copied
            .iter()
            .map(|k| model.param(k).map_or(0, Tensor::numel))
            .sum()
    }
}

/// Parameter name, shape and initializer.
#[derive(Debug, Clone)]
enum Init {
    Uniform { fan_in: usize },
    Normal,
    Const(f64),
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h, dh, f, t) = (c.d_model, c.heads, c.head_dim(), c.d_ffn, c.t_ctx);
    let (p2, cin, cout) = (c.patch * c.patch, c.c_in, c.c_out());
    let mut v: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed.pos".into(), vec![3, cin], Init::Uniform { fan_in: 3 }),
        (
            "embed.patch.weight".into(),
            vec![p2 * cin, d],
            Init::Uniform { fan_in: p2 * cin },
        ),
        ("embed.patch.bias".into(), vec![d], Init::Const(0.0)),
        ("agg.weight".into(), vec![t, d, d], Init::Uniform { fan_in: t * d }),
        ("agg.gamma".into(), vec![d], Init::Normal),
    ];
    for l in 0..c.layers {
        let k = |s: &str| format!("layers.{l}.{s}");
        v.extend([
            (k("mixer.w1"), vec![h, dh, dh], Init::Uniform { fan_in: dh }),
            (k("mixer.b1"), vec![h, dh], Init::Const(0.0)),
            (k("mixer.w2"), vec![h, dh, dh], Init::Uniform { fan_in: dh }),
            (k("mixer.b2"), vec![h, dh], Init::Const(0.0)),
            (k("norm.weight"), vec![d], Init::Const(1.0)),
            (k("norm.bias"), vec![d], Init::Const(0.0)),
            (k("ffn.w1"), vec![d, f], Init::Uniform { fan_in: d }),
            (k("ffn.b1"), vec![f], Init::Const(0.0)),
            (k("ffn.w2"), vec![f, d], Init::Uniform { fan_in: f }),
            (k("ffn.b2"), vec![d], Init::Const(0.0)),
        ]);
    }
    v.push(("decoder.weight".into(), vec![d, p2 * cout], Init::Uniform { fan_in: d }));
    v.push(("decoder.bias".into(), vec![p2 * cout], Init::Const(0.0)));
    v
}

fn init_tensor(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Tensor {
    match *init {
        Init::Uniform { fan_in } => {
            let a = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-a..a))
        }
        Init::Normal => Tensor::from_fn(shape, |_| rng.sample(StandardNormal)),
        Init::Const(x) => Tensor::full(shape, x),
    }
}

/// Whether a parameter belongs to a Fourier attention layer.
pub fn is_layer_param(key: &str) -> bool {
    key.starts_with("layers.")
}

impl DpotModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<(String, Tensor)> = param_specs(&config)
            .into_iter()
            .map(|(k, shape, init)| {
                let t = init_tensor(&shape, &init, &mut rng);
                (k, t)
            })
            .collect();
        let model = Self { config, params };
        debug_assert_eq!(model.param_count(), model.config.param_count());
        Ok(model)
    }

    /// Same shapes as [`DpotModel::new`] with every entry zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|(k, shape, _)| (k, Tensor::zeros(&shape)))
            .collect();
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param(&self, key: &str) -> Option<&Tensor> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn set_param(&mut self, key: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self.param_mut(key).ok_or_else(|| ModelError::Parameter {
            key: key.into(),
            detail: "no such parameter".into(),
        })?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Parameter {
                key: key.into(),
                detail: format!("shape {:?} does not match {:?}", value.shape(), slot.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Adds every parameter to `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        bind_vars(&self.config, &vars)
    }

    /// Differentiable forward of one `[T, H, W, C_in]` context into
    /// `[H, W, C_out]`. The grid must match the config.
    pub fn forward_graph(&self, g: &mut Graph, m: &BoundModel, context: Var) -> Result<Var, ModelError> {
        let expected = [
            self.config.t_ctx,
            self.config.resolution,
            self.config.resolution,
            self.config.c_in,
        ];
        if g.shape(context) != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                actual: g.shape(context).to_vec(),
            });
        }
        Ok(forward_bound(g, m, &self.config, context, self.config.patch)?)
    }

    /// Like [`DpotModel::forward_graph`] but with per-sample input scaling
    /// when the config asks for it. The scaling statistics depend only on the
    /// data, so they enter the graph as constants.
    pub fn forward_sample(&self, g: &mut Graph, m: &BoundModel, context: &Tensor) -> Result<Var, ModelError> {
        if !self.config.input_norm {
            let x = g.constant(context.clone());
            return self.forward_graph(g, m, x);
        }
        let scale = InputScale::of(context);
        let x = g.constant(scale.normalize(context));
        let y = self.forward_graph(g, m, x)?;
        let std = g.constant(Tensor::new(&[scale.std.len()], scale.std.clone())?);
        let mean = g.constant(Tensor::new(&[scale.mean.len()], scale.mean.clone())?);
        let y = g.mul(y, std)?;
        Ok(g.add(y, mean)?)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, context: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let y = self.forward_sample(&mut g, &m, context)?;
        Ok(g.value(y).clone())
    }

    /// Prediction for a context on a different square grid.
    pub fn predict_at(&self, context: &Tensor, mode: ResolutionMode) -> Result<Tensor, ModelError> {
        let s = context.shape().to_vec();
        let native = self.config.resolution;
        if s.len() != 4 || s[0] != self.config.t_ctx || s[1] != s[2] || s[3] != self.config.c_in {
            return Err(ModelError::InputShape {
                expected: vec![self.config.t_ctx, native, native, self.config.c_in],
                actual: s,
            });
        }
        let res = s[1];
        if res == native {
            return self.predict(context);
        }
        match mode {
            ResolutionMode::Signal => {
                let small = resample_frames(context, native, true);
                let y = self.predict(&small)?;
                Ok(resample_frames(&y, res, false))
            }
            ResolutionMode::Kernel => {
                let p = self.config.patch;
                if !(p * res).is_multiple_of(native) {
                    return Err(ModelError::Config(format!(
                        "grid {res} is not a multiple of {} tokens of the native grid",
                        native / p
                    )));
                }
                let p2 = p * res / native;
                let model = self.with_patch_kernels(p2)?;
                model.predict(context)
            }
        }
    }

    /// Copy whose patch and decoder kernels act on `patch x patch` pixels at
    /// grid `resolution * patch / self.patch`. Within each patch, pixel values
    /// are carried between the old and new pixel positions by polynomial
    /// interpolation, exact for fields of degree below both patch sizes.
    pub fn with_patch_kernels(&self, patch: usize) -> Result<Self, ModelError> {
        let c = &self.config;
        let mut config = c.clone();
        config.resolution = c.token_grid() * patch;
        config.patch = patch;
        let mut out = Self::zeros(config)?;
        for (k, t) in &self.params {
            let v = match k.as_str() {
                "embed.patch.weight" => resample_kernel_rows(t, c.patch, patch, c.c_in),
                "decoder.weight" => resample_kernel_cols(t, c.patch, patch, c.c_out()),
                "decoder.bias" => {
                    let row = t.clone().reshape(&[1, t.numel()])?;
                    let r = resample_kernel_cols(&row, c.patch, patch, c.c_out());
                    let n = r.numel();
                    r.reshape(&[n])?
                }
                _ => t.clone(),
            };
            out.set_param(k, v)?;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.params.clone(),
            optimizer: Vec::new(),
            state: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::zeros(config)?;
        let keys: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
        for k in keys {
            let t = ckpt.param(&k).ok_or_else(|| ModelError::Parameter {
                key: k.clone(),
                detail: "missing".into(),
            })?;
            model.set_param(&k, t.clone())?;
        }
        Ok(model)
    }

    /// Loads a checkpoint that must have been written for `expected`.
    pub fn from_checkpoint_expecting(ckpt: &Checkpoint, expected: &ModelConfig) -> Result<Self, ModelError> {
        let found: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        if &found != expected {
            return Err(ModelError::Incompatible {
                expected: serde_json::to_string(expected)?,
                found: serde_json::to_string(&found)?,
            });
        }
        Self::from_checkpoint(ckpt)
    }
}

/// Views variables already in a graph, in parameter order, as a model.
pub fn bind_params(model: &DpotModel, _g: &Graph, vars: &[Var]) -> BoundModel {
    assert_eq!(vars.len(), model.params.len(), "one variable per parameter");
    bind_vars(&model.config, vars)
}

fn bind_vars(c: &ModelConfig, vars: &[Var]) -> BoundModel {
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("parameter count matches config");
    let (pos, patch_weight, patch_bias, agg_weight, agg_gamma) = (next(), next(), next(), next(), next());
    let layers = (0..c.layers)
        .map(|_| LayerVars {
            mixer: MixerVars {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            norm_weight: next(),
            norm_bias: next(),
            ffn: FfnVars {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
        })
        .collect();
    let (decoder_weight, decoder_bias) = (next(), next());
    BoundModel {
        pos,
        patch_weight,
        patch_bias,
        agg_weight,
        agg_gamma,
        layers,
        decoder_weight,
        decoder_bias,
        vars: vars.to_vec(),
    }
}

fn forward_bound(
    g: &mut Graph,
    m: &BoundModel,
    c: &ModelConfig,
    context: Var,
    patch: usize,
) -> Result<Var, TensorError> {
    let x = positional_encode(g, context, m.pos)?;
    let tokens = patch_embed(g, x, m.patch_weight, m.patch_bias, patch)?;
    let mut z = temporal_aggregate(g, tokens, m.agg_weight, m.agg_gamma)?;
    for layer in &m.layers {
        z = fourier_attention_layer(g, z, layer, c.heads, c.groups)?;
    }
    decode(g, z, m.decoder_weight, m.decoder_bias, patch)
}

/// Resamples every channel of `[..., H, W, C]` to `res x res`. With
/// `keep_last_nearest` the final channel (the mask) is resampled by nearest
/// neighbour instead.
fn resample_frames(x: &Tensor, res: usize, keep_last_nearest: bool) -> Tensor {
    let r = x.rank();
    let (h, w, c) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    let lead: usize = x.shape()[..r - 3].iter().product();
    let mut shape = x.shape().to_vec();
    shape[r - 3] = res;
    shape[r - 2] = res;
    let mut out = Tensor::zeros(&shape);
    for b in 0..lead {
        let src = &x.data()[b * h * w * c..(b + 1) * h * w * c];
        let dst = &mut out.data_mut()[b * res * res * c..(b + 1) * res * res * c];
        for ch in 0..c {
            let field: Vec<f64> = src.iter().skip(ch).step_by(c).copied().collect();
            let r2 = if keep_last_nearest && ch == c - 1 {
                let m: Vec<u8> = field.iter().map(|&v| (v != 0.0) as u8).collect();
                crate::data::nearest_mask(&m, (h, w), (res, res))
                    .into_iter()
                    .map(f64::from)
                    .collect()
            } else {
                fourier_resample(&field, (h, w), (res, res))
            };
            for (i, v) in r2.into_iter().enumerate() {
                dst[i * c + ch] = v;
            }
        }
    }
    out
}

/// `[to, from]` matrix evaluating the Lagrange interpolant through the `from`
/// pixel positions `k / from` of a unit patch at the positions `j / to`.
fn lagrange_matrix(from: usize, to: usize) -> Vec<f64> {
    let node = |i: usize, n: usize| i as f64 / n as f64;
    let mut m = vec![0.0; to * from];
    for j in 0..to {
        let x = node(j, to);
        for k in 0..from {
            let xk = node(k, from);
            m[j * from + k] = (0..from)
                .filter(|&i| i != k)
                .map(|i| (x - node(i, from)) / (xk - node(i, from)))
                .product();
        }
    }
    m
}

/// 2D tensor product of [`lagrange_matrix`]: `[to*to, from*from]`, row-major pixels.
fn lagrange_matrix_2d(from: usize, to: usize) -> Vec<f64> {
    let m = lagrange_matrix(from, to);
    let (a, b) = (to * to, from * from);
    let mut out = vec![0.0; a * b];
    for j in 0..a {
        for k in 0..b {
            out[j * b + k] = m[(j / to) * from + k / from] * m[(j % to) * from + k % from];
        }
    }
    out
}

/// Rows of `w: [p*p*c, n]` are `(row, col, channel)` patch kernels. The
/// result acts on `q x q` pixels as the original acts on the `p x p` values
/// interpolated from them: `w'[j] = sum_k w[k] L[k, j]`.
fn resample_kernel_rows(w: &Tensor, p: usize, q: usize, c: usize) -> Tensor {
    let n = w.shape()[1];
    let interp = lagrange_matrix_2d(q, p);
    let (pp, qq) = (p * p, q * q);
    let mut out = Tensor::zeros(&[qq * c, n]);
    for ch in 0..c {
        for col in 0..n {
            for j in 0..qq {
                let v: f64 = (0..pp)
                    .map(|k| w.data()[(k * c + ch) * n + col] * interp[k * qq + j])
                    .sum();
                out.data_mut()[(j * c + ch) * n + col] = v;
            }
        }
    }
    out
}

/// Columns of `w: [m, p*p*c]` are `(row, col, channel)` pixel blocks; each
/// block is interpolated from `p x p` to `q x q` pixel centers.
fn resample_kernel_cols(w: &Tensor, p: usize, q: usize, c: usize) -> Tensor {
    let m = w.shape()[0];
    let interp = lagrange_matrix_2d(p, q);
    let (pp, qq) = (p * p, q * q);
    let mut out = Tensor::zeros(&[m, qq * c]);
    for row in 0..m {
        for ch in 0..c {
            for j in 0..qq {
                let v: f64 = (0..pp)
                    .map(|k| interp[j * pp + k] * w.data()[row * pp * c + k * c + ch])
                    .sum();
                out.data_mut()[row * qq * c + j * c + ch] = v;
            }
        }
    }
    out
}

/// Initializes a model for `target` from a checkpoint. Fourier attention
/// layers are always copied; embeddings and decoder are copied only when the
/// input geometry (grid, patch, channels, context length) is unchanged.
pub fn transfer_weights(
    source: &Checkpoint,
    target: &ModelConfig,
    seed: u64,
) -> Result<(DpotModel, TransferReport), ModelError> {
    let src: ModelConfig = serde_json::from_value(source.config.clone())?;
    if (src.d_model, src.heads, src.layers, src.d_ffn) != (target.d_model, target.heads, target.layers, target.d_ffn) {
        return Err(ModelError::Incompatible {
            expected: serde_json::to_string(target)?,
            found: serde_json::to_string(&src)?,
        });
    }
    let same_geometry = (src.resolution, src.patch, src.c_in, src.t_ctx)
        == (target.resolution, target.patch, target.c_in, target.t_ctx);
    let mut model = DpotModel::new(target.clone(), seed)?;
    let mut report = TransferReport {
        copied: Vec::new(),
        reinitialized: Vec::new(),
    };
    let keys: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    for k in keys {
        let take = is_layer_param(&k) || same_geometry;
        match source.param(&k) {
            Some(t) if take => {
                model.set_param(&k, t.clone())?;
                report.copied.push(k);
            }
            None if is_layer_param(&k) => {
                return Err(ModelError::Parameter {
                    key: k,
                    detail: "missing from source".into(),
                })
            }
            _ => report.reinitialized.push(k),
        }
    }
    Ok((model, report))
}

/// Draws the identity-acting mixer weights used by the pooling construction:
/// per head, `w1 = [[I, -I], [0, 0]]` and `w2 = [[I, 0], [-I, 0]]` so that
/// `x -> gelu(x) - gelu(-x) = x` on the first half of each head's channels.
pub fn identity_mixer_weights(heads: usize, head_dim: usize) -> (Tensor, Tensor) {
    assert!(head_dim.is_multiple_of(2), "head dimension must be even");
    let half = head_dim / 2;
    let mut w1 = Tensor::zeros(&[heads, head_dim, head_dim]);
    let mut w2 = Tensor::zeros(&[heads, head_dim, head_dim]);
    for h in 0..heads {
        for i in 0..half {
            w1.set(&[h, i, i], 1.0);
            w1.set(&[h, i, half + i], -1.0);
            w2.set(&[h, i, i], 1.0);
            w2.set(&[h, half + i, i], -1.0);
        }
    }
    (w1, w2)
}
