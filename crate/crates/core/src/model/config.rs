use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input grid side length.
    pub resolution: usize,
    pub patch: usize,
    /// Context frames.
    pub t_ctx: usize,
    /// Input channels including the mask channel.
    pub c_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ffn: usize,
    pub groups: usize,
    /// Rescale each context to zero mean and unit spread per channel and map
    /// the prediction back.
    #[serde(default)]
    pub input_norm: bool,
}

impl ModelConfig {
    /// Desk-scale default: 32x32 input, 4x4 patches, 64 hidden channels.
    pub fn nano(c_in: usize) -> Self {
        Self {
            resolution: 32,
            patch: 4,
            t_ctx: 10,
            c_in,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ffn: 64,
            groups: 8,
            input_norm: false,
        }
    }

    /// Larger preset at 128x128 input, 8x8 patches, 512 hidden channels.
    pub fn tiny(c_in: usize) -> Self {
        Self {
            resolution: 128,
            patch: 8,
            t_ctx: 10,
            c_in,
            d_model: 512,
            heads: 4,
            layers: 4,
            d_ffn: 512,
            groups: 8,
            input_norm: false,
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_in - 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn token_grid(&self) -> usize {
        self.resolution / self.patch
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.patch == 0 || self.resolution == 0 || !self.resolution.is_multiple_of(self.patch) {
            return fail(format!(
                "patch {} must divide resolution {}",
                self.patch, self.resolution
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.groups == 0 || !self.d_model.is_multiple_of(self.groups) {
            return fail(format!("groups {} must divide d_model {}", self.groups, self.d_model));
        }
        if self.t_ctx == 0 || self.c_in < 2 || self.d_ffn == 0 || self.layers == 0 {
            return fail("t_ctx, d_ffn and layers must be positive and c_in at least 2".into());
        }
        Ok(())
    }

    /// Parameters of one Fourier attention layer.
    pub fn layer_param_count(&self) -> usize {
        let (d, h, dh, f) = (self.d_model, self.heads, self.head_dim(), self.d_ffn);
        h * (2 * dh * dh + 2 * dh) + 2 * d + (2 * d * f + d + f)
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let (d, p2, t) = (self.d_model, self.patch * self.patch, self.t_ctx);
        let embed = 3 * self.c_in + p2 * self.c_in * d + d;
        let aggregate = t * d * d + d;
        let decoder = d * p2 * self.c_out() + p2 * self.c_out();
        embed + aggregate + self.layers * self.layer_param_count() + decoder
    }
}
