use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, ParamId, Result as TensorResult, Tensor};

/// Attention projections that can host an adapter pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "q" => Some(Self::Q),
            "k" => Some(Self::K),
            "v" => Some(Self::V),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Numerator of the standard `alpha / rank` branch factor.
    pub alpha: f64,
    /// Names from `{q, k, v}`; anything else is rejected by `attach_lora`.
    pub targets: Vec<String>,
    /// Test-time branch multiplier in `[0, 1]`. Training always uses 1.
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec!["q".into(), "k".into(), "v".into()],
            scale: 1.0,
        }
    }
}

/// `A: r × d_in`, `B: d_out × r`. `B` starts at zero.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub host: String,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug)]
pub struct LoraSet {
    pub pairs: BTreeMap<(usize, LoraTarget), LoraPair>,
    pub rank: usize,
    pub alpha: f64,
    pub scale: f64,
}

impl LoraSet {
    /// Total multiplier on `B·A·x`: `s · alpha / r`.
    pub fn branch_factor(&self) -> f64 {
        self.scale * self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.pairs
            .values()
            .map(|p| self.rank * (p.d_in + p.d_out))
            .sum()
    }
}

/// Reference single-projection forward on rows of `x`:
/// `x·W + s·(alpha/r)·(x·Aᵀ)·Bᵀ`, with `W` stored `[d_in, d_out]`.
/// The branch is skipped entirely when `s == 0`.
pub fn lora_forward(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, s: f64) -> TensorResult<Tensor> {
    let base = kernels::matmul(x, w)?;
    if s == 0.0 {
        return Ok(base);
    }
    let rank = a.rows();
    let branch = kernels::matmul_nt(&kernels::matmul_nt(x, a)?, b)?;
    kernels::add(&base, &kernels::scalar_mul(&branch, s * alpha / rank as f64))
}
