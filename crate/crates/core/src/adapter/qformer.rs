use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdapterError, Result};
use crate::nn::{multi_head_attention, FeedForward, LayerNorm, Linear};
use crate::rng::normal_tensor;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Learnable queries that self-attend, cross-attend to encoder frames, then
/// pass through a feed-forward layer; pre-norm residual blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QformerConfig {
    pub num_blocks: usize,
    pub num_queries: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    /// Add sinusoidal positions to encoder frames before cross-attention.
    /// Off by default, which makes the output invariant to frame order.
    pub encoder_positions: bool,
}

impl Default for QformerConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            num_queries: 64,
            d_model: 32,
            num_heads: 4,
            ffn_mult: 4,
            encoder_positions: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionProj {
    fn new(store: &mut ParamStore, name: &str, d: usize, kv_in: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng, false)?,
            k: Linear::new(store, &format!("{name}.k"), kv_in, d, rng, false)?,
            v: Linear::new(store, &format!("{name}.v"), kv_in, d, rng, false)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng, false)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, kv: Var, heads: usize) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let a = multi_head_attention(tape, q, k, v, heads, false)?;
        Ok(self.o.forward(tape, store, a)?)
    }

    fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct QformerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionProj,
    pub ln_cross: LayerNorm,
    pub cross_attn: AttentionProj,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Qformer {
    pub queries: ParamId,
    pub blocks: Vec<QformerBlock>,
    pub ln_out: LayerNorm,
    pub num_queries: usize,
    pub d_model: usize,
    num_heads: usize,
    encoder_positions: bool,
}

impl Qformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &QformerConfig,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.num_heads == 0 || cfg.d_model % cfg.num_heads != 0 {
            return Err(AdapterError::Config(format!(
                "qformer d_model {} is not divisible by num_heads {}",
                cfg.d_model, cfg.num_heads
            )));
        }
        if cfg.num_queries == 0 || cfg.ffn_mult == 0 {
            return Err(AdapterError::Config("qformer num_queries and ffn_mult must be positive".into()));
        }
        let d = cfg.d_model;
        let queries = store.add(
            format!("{name}.queries"),
            normal_tensor(rng, &[cfg.num_queries, d], 1.0),
            false,
        )?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let p = format!("{name}.block{i}");
            blocks.push(QformerBlock {
                ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d, false)?,
                self_attn: AttentionProj::new(store, &format!("{p}.self_attn"), d, d, rng)?,
                ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d, false)?,
                cross_attn: AttentionProj::new(store, &format!("{p}.cross_attn"), d, in_dim, rng)?,
                ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d, false)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * cfg.ffn_mult, rng, false)?,
            });
        }
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d, false)?;
        Ok(Self {
            queries,
            blocks,
            ln_out,
            num_queries: cfg.num_queries,
            d_model: d,
            num_heads: cfg.num_heads,
            encoder_positions: cfg.encoder_positions,
        })
    }

    /// `num_queries × d_model` summary of the frames in `x`, for any length.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let kv = if self.encoder_positions {
            let (t, d) = {
                let s = tape.shape(x)?;
                (s[0], s[1])
            };
            let pos = tape.constant(sinusoidal_positions(t, d));
            tape.add(x, pos)?
        } else {
            x
        };
        let mut h = tape.param(store, self.queries);
        for b in &self.blocks {
            let n = b.ln_self.forward(tape, store, h)?;
            let a = b.self_attn.forward(tape, store, n, n, self.num_heads)?;
            h = tape.add(h, a)?;
            let n = b.ln_cross.forward(tape, store, h)?;
            let a = b.cross_attn.forward(tape, store, n, kv, self.num_heads)?;
            h = tape.add(h, a)?;
            let n = b.ln_ffn.forward(tape, store, h)?;
            let f = b.ffn.forward(tape, store, n)?;
            h = tape.add(h, f)?;
        }
        Ok(self.ln_out.forward(tape, store, h)?)
    }

    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| 3 * 2 * d + b.self_attn.num_params() + b.cross_attn.num_params() + b.ffn.num_params())
            .sum();
        self.num_queries * d + blocks + 2 * d
    }
}

pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d], |i| {
        let (pos, c) = ((i / d) as f64, i % d);
        let rate = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
        if c % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn heads_must_divide() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(0, "q");
        let cfg = QformerConfig {
            d_model: 30,
            num_heads: 4,
            ..QformerConfig::default()
        };
        let err = Qformer::new(&mut store, "q", &cfg, 8, &mut rng).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn output_has_one_row_per_query() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(0, "q");
        let cfg = QformerConfig {
            num_queries: 5,
            d_model: 8,
            num_heads: 2,
            ..QformerConfig::default()
        };
        let q = Qformer::new(&mut store, "q", &cfg, 3, &mut rng).unwrap();
        for t in [1, 9] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[t, 3], 0.3));
            let y = q.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y).unwrap(), &[5, 8]);
        }
    }
}
