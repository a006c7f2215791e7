use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdapterError, Result};
use crate::rng::normal_tensor;
use crate::tensor::kernels::conv1d_out_len;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Strided 1-D convolutions over time. All but the last layer keep the
/// encoder width; the last maps to `mid_channels`. GELU sits between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnAdapterConfig {
    pub num_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub mid_channels: usize,
}

impl Default for CnnAdapterConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            kernel: 5,
            stride: 5,
            padding: 0,
            mid_channels: 32,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
}

#[derive(Clone, Debug)]
pub struct CnnAdapter {
    layers: Vec<ConvLayer>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl CnnAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &CnnAdapterConfig,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.num_layers == 0 || cfg.kernel == 0 || cfg.stride == 0 || cfg.mid_channels == 0 {
            return Err(AdapterError::Config(
                "cnn num_layers, kernel, stride and mid_channels must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let c_in = in_dim;
            let c_out = if i + 1 == cfg.num_layers { cfg.mid_channels } else { in_dim };
            let std = 1.0 / ((c_in * cfg.kernel) as f64).sqrt();
            let w = store.add(
                format!("{name}.conv{i}.w"),
                normal_tensor(rng, &[c_out, c_in, cfg.kernel], std),
                false,
            )?;
            let b = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[c_out]), false)?;
            layers.push(ConvLayer { w, b, c_in, c_out });
        }
        Ok(Self {
            layers,
            kernel: cfg.kernel,
            stride: cfg.stride,
            padding: cfg.padding,
        })
    }

    /// Length after every layer, or `None` if some layer has no full window.
    pub fn output_len_opt(&self, frames: usize) -> Option<usize> {
        self.layers.iter().try_fold(frames, |t, _| {
            conv1d_out_len(t, self.kernel, self.stride, self.padding).filter(|&n| n > 0)
        })
    }

    /// Smallest input length that yields at least one output.
    pub fn min_frames(&self) -> usize {
        let mut need = 1usize;
        for _ in &self.layers {
            need = ((need - 1) * self.stride + self.kernel).saturating_sub(2 * self.padding).max(1);
        }
        need
    }

    pub fn output_len(&self, frames: usize) -> Result<usize> {
        self.output_len_opt(frames).ok_or(AdapterError::TooShort {
            frames,
            min: self.min_frames(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let frames = tape.shape(x)?[0];
        self.output_len(frames)?;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h)?;
            }
            let w = tape.param(store, l.w);
            let b = tape.param(store, l.b);
            h = tape.conv1d(h, w, b, self.stride, self.padding)?;
        }
        Ok(h)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.c_out * l.c_in * self.kernel + l.c_out)
            .sum()
    }
}
