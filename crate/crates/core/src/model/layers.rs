//! Graph-level building blocks. Every function takes already-bound variables,
//! so the same code serves training, inference and finite-difference checks.

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct MixerVars {
    /// `[heads, d/heads, d/heads]`
    pub w1: Var,
    /// `[heads, d/heads]`
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub mixer: MixerVars,
    pub norm_weight: Var,
    pub norm_bias: Var,
    pub ffn: FfnVars,
}

/// Normalized frame times `(k + 1) / T` for `k = 0..T`.
pub fn frame_times(t_ctx: usize) -> Vec<f64> {
    (0..t_ctx).map(|k| (k + 1) as f64 / t_ctx as f64).collect()
}

/// `[T, H, W, 3]` table of `(i / H, j / W, t_k)`.
pub fn coordinate_grid(t_ctx: usize, h: usize, w: usize) -> Tensor {
    let times = frame_times(t_ctx);
    let mut data = Vec::with_capacity(t_ctx * h * w * 3);
    for &t in &times {
        for i in 0..h {
            for j in 0..w {
                data.extend([i as f64 / h as f64, j as f64 / w as f64, t]);
            }
        }
    }
    Tensor::new(&[t_ctx, h, w, 3], data).expect("coordinate grid shape")
}

/// Adds the learned linear map of pixel coordinates `pos: [3, C]` to a
/// `[T, H, W, C]` context.
pub fn positional_encode(g: &mut Graph, context: Var, pos: Var) -> Result<Var> {
    let s = g.shape(context).to_vec();
    if s.len() != 4 {
        return Err(invalid(
            "positional_encode",
            format!("context must be [T, H, W, C], got {s:?}"),
        ));
    }
    let coords = g.constant(coordinate_grid(s[0], s[1], s[2]));
    let p = g.matmul(coords, pos)?;
    g.add(context, p)
}

/// Non-overlapping `patch x patch` tokens of `[T, H, W, C]` frames, each mapped
/// by `weight: [patch * patch * C, d]` plus `bias: [d]`. Within a patch the
/// flattened order is `(row, col, channel)`.
pub fn patch_embed(g: &mut Graph, frames: Var, weight: Var, bias: Var, patch: usize) -> Result<Var> {
    let s = g.shape(frames).to_vec();
    if s.len() != 4 {
        return Err(invalid(
            "patch_embed",
            format!("frames must be [T, H, W, C], got {s:?}"),
        ));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid("patch_embed", format!("patch {patch} does not divide {h}x{w}")));
    }
    let (n1, n2) = (h / patch, w / patch);
    let x = g.reshape(frames, &[t, n1, patch, n2, patch, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[t * n1 * n2, patch * patch * c])?;
    let y = g.matmul(x, weight)?;
    let y = g.add(y, bias)?;
    let d = g.shape(y)[1];
    g.reshape(y, &[t, n1, n2, d])
}

/// `sum_k cos(gamma * t_k) * (z_k W_k)` over `tokens: [T, n1, n2, d]` with
/// `weight: [T, d, d]` and `gamma: [d]`.
pub fn temporal_aggregate(g: &mut Graph, tokens: Var, weight: Var, gamma: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let ws = g.shape(weight).to_vec();
    if s.len() != 4 || ws.len() != 3 || ws[0] != s[0] {
        return Err(TensorError::ShapeMismatch {
            op: "temporal_aggregate",
            lhs: s,
            rhs: ws,
        });
    }
    let (t, n1, n2, d) = (s[0], s[1], s[2], s[3]);
    let ft = frame_times(t);
    let times = g.constant(Tensor::from_fn(&[t, d], |i| ft[i / d]));
    let phase = g.mul(times, gamma)?;
    let modulation = g.cos(phase)?;
    let modulation = g.reshape(modulation, &[t, 1, d])?;
    let z = g.reshape(tokens, &[t, n1 * n2, d])?;
    let z = g.matmul(z, weight)?;
    let z = g.mul(z, modulation)?;
    let z = g.sum_axis(z, 0)?;
    g.reshape(z, &[n1, n2, d])
}

/// `[n1, n2, 2]` selector keeping only the listed frequency bins.
pub fn mode_mask(n1: usize, n2: usize, keep: &[(usize, usize)]) -> Tensor {
    let mut m = Tensor::zeros(&[n1, n2, 2]);
    for &(i, j) in keep {
        m.set(&[i, j, 0], 1.0);
        m.set(&[i, j, 1], 1.0);
    }
    m
}

/// Frequency-domain branch of the token mixer on `z: [n1, n2, d]`.
///
/// Fourier coefficients are normalized to grid means (`fft / N`) so the shared
/// per-frequency MLP sees resolution-independent inputs. Each head applies its
/// own two-layer MLP to the real and imaginary parts separately. `mask`, if
/// given, zeroes bins before and after the MLP.
pub fn spectral_mix(g: &mut Graph, z: Var, p: &MixerVars, heads: usize, mask: Option<&Tensor>) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 {
        return Err(invalid(
            "spectral_mix",
            format!("tokens must be [n1, n2, d], got {s:?}"),
        ));
    }
    let (n1, n2, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(invalid(
            "spectral_mix",
            format!("{heads} heads do not divide {d} channels"),
        ));
    }
    let dh = d / heads;
    let m2 = n1 * n2 * 2;
    let root_n = ((n1 * n2) as f64).sqrt();
    let mask = mask.map(|m| g.constant(m.clone()));

    let x = g.permute(z, &[2, 0, 1])?;
    let x = g.fft2(x)?;
    let mut x = g.as_pairs(x)?;
    if let Some(m) = mask {
        x = g.mul(x, m)?;
    }
    let x = g.scale(x, 1.0 / root_n)?;
    let x = g.reshape(x, &[heads, dh, m2])?;
    let x = g.permute(x, &[0, 2, 1])?;

    let b1 = g.reshape(p.b1, &[heads, 1, dh])?;
    let b2 = g.reshape(p.b2, &[heads, 1, dh])?;
    let y = g.matmul(x, p.w1)?;
    let y = g.add(y, b1)?;
    let y = g.gelu(y)?;
    let y = g.matmul(y, p.w2)?;
    let y = g.add(y, b2)?;

    let y = g.permute(y, &[0, 2, 1])?;
    let mut y = g.reshape(y, &[d, n1, n2, 2])?;
    if let Some(m) = mask {
        y = g.mul(y, m)?;
    }
    let y = g.scale(y, root_n)?;
    let y = g.from_pairs(y)?;
    let y = g.ifft2(y)?;
    let y = g.real_part(y)?;
    g.permute(y, &[1, 2, 0])
}

/// Two-layer channel MLP with GELU on `[..., d]`.
pub fn channel_ffn(g: &mut Graph, z: Var, p: &FfnVars) -> Result<Var> {
    let y = g.matmul(z, p.w1)?;
    let y = g.add(y, p.b1)?;
    let y = g.gelu(y)?;
    let y = g.matmul(y, p.w2)?;
    g.add(y, p.b2)
}

/// Mixer with residual, group norm, then channel FFN with residual.
pub fn fourier_attention_layer(g: &mut Graph, z: Var, p: &LayerVars, heads: usize, groups: usize) -> Result<Var> {
    let mixed = spectral_mix(g, z, &p.mixer, heads, None)?;
    let z = g.add(z, mixed)?;
    let z = g.group_norm(z, p.norm_weight, p.norm_bias, groups)?;
    let f = channel_ffn(g, z, &p.ffn)?;
    g.add(z, f)
}

/// Per-token linear map to `patch x patch x c_out` pixels, reassembled into
/// `[n1 * patch, n2 * patch, c_out]`.
pub fn decode(g: &mut Graph, z: Var, weight: Var, bias: Var, patch: usize) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let out = g.shape(weight)[1];
    if s.len() != 3 || patch == 0 || !out.is_multiple_of(patch * patch) {
        return Err(invalid(
            "decode",
            format!("tokens {s:?} with {out} outputs and patch {patch}"),
        ));
    }
    let (n1, n2, c) = (s[0], s[1], out / (patch * patch));
    let y = g.matmul(z, weight)?;
    let y = g.add(y, bias)?;
    let y = g.reshape(y, &[n1, n2, patch, patch, c])?;
    let y = g.permute(y, &[0, 2, 1, 3, 4])?;
    g.reshape(y, &[n1 * patch, n2 * patch, c])
}

fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::Invalid { op, detail }
}
