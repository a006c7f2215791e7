//! Tiny frozen decoder-only language model with optional LoRA on the
//! attention projections.
//!
//! Pre-norm blocks, learned absolute positions, tied or untied output head.
//! A prefix of continuous embeddings can precede the token embeddings; the
//! joint sequence is numbered from position 0 and attended causally.

mod lora;

pub use lora::{lora_forward, LoraConfig, LoraPair, LoraSet, LoraTarget};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{multi_head_attention, FeedForward, LayerNorm, Linear};
use crate::rng::{normal_tensor, rng_for};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::tokenizer::EOS;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid language model config: {0}")]
    Config(String),
    #[error("sequence of {prefix} prefix vectors + {tokens} tokens exceeds max_seq_len {max}")]
    Overflow { prefix: usize, tokens: usize, max: usize },
    #[error("LoRA scale {0} is outside [0, 1]")]
    Scale(f64),
    #[error("unknown LoRA target `{0}` (expected q, k or v)")]
    UnknownTarget(String),
    #[error("LoRA is already attached")]
    AlreadyAttached,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LmError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyLmConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
    pub tied_head: bool,
    /// Std of the token embedding table. Large enough that the frozen head
    /// can express confident predictions.
    pub embed_std: f64,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 32,
            vocab_size: crate::tokenizer::Tokenizer::default().vocab_size(),
            max_seq_len: 256,
            ffn_mult: 4,
            tied_head: true,
            embed_std: 0.5,
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(LmError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return Err(LmError::Config("vocab_size, max_seq_len and ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LmBlock {
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: TinyLmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<LmBlock>,
    pub ln_f: LayerNorm,
    pub head: Option<ParamId>,
    pub lora: Option<LoraSet>,
}

impl TinyLm {
    /// Registers a frozen backbone under `lm.`.
    pub fn new(store: &mut ParamStore, config: TinyLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "lm");
        let d = config.d_model;
        let tok_emb = store.add(
            "lm.tok_emb",
            normal_tensor(&mut rng, &[config.vocab_size, d], config.embed_std),
            true,
        )?;
        let pos_emb = store.add(
            "lm.pos_emb",
            normal_tensor(&mut rng, &[config.max_seq_len, d], 0.1),
            true,
        )?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("lm.layer{i}");
            blocks.push(LmBlock {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d, true)?,
                q: Linear::new(store, &format!("{p}.q"), d, d, &mut rng, true)?,
                k: Linear::new(store, &format!("{p}.k"), d, d, &mut rng, true)?,
                v: Linear::new(store, &format!("{p}.v"), d, d, &mut rng, true)?,
                o: Linear::new(store, &format!("{p}.o"), d, d, &mut rng, true)?,
                ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d, true)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, &mut rng, true)?,
            });
        }
        let ln_f = LayerNorm::new(store, "lm.ln_f", d, true)?;
        let head = if config.tied_head {
            None
        } else {
            Some(store.add(
                "lm.head",
                normal_tensor(&mut rng, &[d, config.vocab_size], 1.0 / (d as f64).sqrt()),
                true,
            )?)
        };
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
            lora: None,
        })
    }

    /// Adds one trainable pair per targeted projection per layer, under
    /// `lora.`. The backbone stays frozen.
    pub fn attach_lora(&mut self, store: &mut ParamStore, cfg: &LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(LmError::AlreadyAttached);
        }
        if cfg.rank == 0 {
            return Err(LmError::Config("LoRA rank must be at least 1".into()));
        }
        check_scale(cfg.scale)?;
        let mut targets = Vec::new();
        for t in &cfg.targets {
            let parsed = LoraTarget::parse(t).ok_or_else(|| LmError::UnknownTarget(t.clone()))?;
            if !targets.contains(&parsed) {
                targets.push(parsed);
            }
        }
        targets.sort();
        let mut rng = rng_for(seed, "lora");
        let d = self.config.d_model;
        let mut pairs = BTreeMap::new();
        for layer in 0..self.blocks.len() {
            for &t in &targets {
                let name = format!("lora.layer{layer}.{}", t.as_str());
                let a = store.add(
                    format!("{name}.a"),
                    normal_tensor(&mut rng, &[cfg.rank, d], 1.0 / (d as f64).sqrt()),
                    false,
                )?;
                let b = store.add(format!("{name}.b"), Tensor::zeros(&[d, cfg.rank]), false)?;
                pairs.insert(
                    (layer, t),
                    LoraPair {
                        a,
                        b,
                        host: format!("lm.layer{layer}.{}", t.as_str()),
                        d_in: d,
                        d_out: d,
                    },
                );
            }
        }
        self.lora = Some(LoraSet {
            pairs,
            rank: cfg.rank,
            alpha: cfg.alpha,
            scale: cfg.scale,
        });
        Ok(())
    }

    /// Inference-time branch multiplier. A configuration-phase call: it
    /// needs exclusive access to the model.
    pub fn set_lora_scale(&mut self, s: f64) -> Result<()> {
        check_scale(s)?;
        if let Some(l) = &mut self.lora {
            l.scale = s;
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> Option<f64> {
        self.lora.as_ref().map(|l| l.scale)
    }

    fn project(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        target: LoraTarget,
        lin: &Linear,
        x: Var,
    ) -> Result<Var> {
        let base = lin.forward(tape, store, x)?;
        let Some(set) = &self.lora else { return Ok(base) };
        let Some(pair) = set.pairs.get(&(layer, target)) else { return Ok(base) };
        // s == 0 takes the exact LoRA-free path.
        if set.scale == 0.0 {
            return Ok(base);
        }
        let a = tape.param(store, pair.a);
        let b = tape.param(store, pair.b);
        let ax = tape.matmul_nt(x, a)?;
        let bax = tape.matmul_nt(ax, b)?;
        let scaled = tape.scalar_mul(bax, set.branch_factor())?;
        Ok(tape.add(base, scaled)?)
    }

    /// Logits for every position of `[prefix ∥ embed(tokens)]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prefix: Option<Var>, tokens: &[u32]) -> Result<Var> {
        let s = match prefix {
            Some(p) => {
                let shape = tape.shape(p)?;
                if shape.len() != 2 || shape[1] != self.config.d_model {
                    return Err(TensorError::ShapeMismatch {
                        op: "lm_forward prefix",
                        lhs: shape.to_vec(),
                        rhs: vec![self.config.d_model],
                    }
                    .into());
                }
                shape[0]
            }
            None => 0,
        };
        let n = s + tokens.len();
        if n > self.config.max_seq_len {
            return Err(LmError::Overflow {
                prefix: s,
                tokens: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if n == 0 {
            return Err(LmError::Config("empty input: no prefix and no tokens".into()));
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(p) = prefix {
            parts.push(p);
        }
        if !tokens.is_empty() {
            let table = tape.param(store, self.tok_emb);
            let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            parts.push(tape.embedding(table, &ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.slice_rows(pos, 0, n)?;
        let mut h = tape.add(x, pos)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let a_in = b.ln_attn.forward(tape, store, h)?;
            let q = self.project(tape, store, i, LoraTarget::Q, &b.q, a_in)?;
            let k = self.project(tape, store, i, LoraTarget::K, &b.k, a_in)?;
            let v = self.project(tape, store, i, LoraTarget::V, &b.v, a_in)?;
            let att = multi_head_attention(tape, q, k, v, self.config.num_heads, true)?;
            let att = b.o.forward(tape, store, att)?;
            h = tape.add(h, att)?;
            let f_in = b.ln_ffn.forward(tape, store, h)?;
            let f = b.ffn.forward(tape, store, f_in)?;
            h = tape.add(h, f)?;
        }
        let h = self.ln_f.forward(tape, store, h)?;
        let logits = match self.head {
            Some(w) => {
                let w = tape.param(store, w);
                tape.matmul(h, w)?
            }
            None => {
                let table = tape.param(store, self.tok_emb);
                tape.matmul_nt(h, table)?
            }
        };
        Ok(logits)
    }

    /// Argmax decoding of up to `max_new` tokens after `prompt`. Stops at
    /// end-of-sequence (not included in the result) or when the context is
    /// full.
    pub fn generate_greedy(
        &self,
        store: &ParamStore,
        prefix: Option<&Tensor>,
        prompt: &[u32],
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let s = prefix.map_or(0, Tensor::rows);
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        let mut tape = Tape::new();
        while out.len() < max_new && s + tokens.len() < self.config.max_seq_len {
            tape.reset();
            let p = prefix.map(|t| tape.constant(t.clone()));
            let logits = self.forward(&mut tape, store, p, &tokens)?;
            let logits = tape.value(logits)?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    pub fn backbone_params(&self, store: &ParamStore) -> usize {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm."))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }
}

fn check_scale(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(LmError::Scale(s))
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn cfg() -> TinyLmConfig {
        TinyLmConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            vocab_size: 20,
            max_seq_len: 16,
            ..TinyLmConfig::default()
        }
    }

    fn logits(lm: &TinyLm, store: &ParamStore, prefix: Option<&Tensor>, tokens: &[u32]) -> Tensor {
        let mut tape = Tape::new();
        let p = prefix.map(|t| tape.constant(t.clone()));
        let l = lm.forward(&mut tape, store, p, tokens).unwrap();
        tape.value(l).unwrap().clone()
    }

    #[test]
    fn lora_pair_count_and_params() {
        let mut store = ParamStore::new();
        let mut lm = TinyLm::new(&mut store, TinyLmConfig { d_model: 32, ..cfg() }, 1).unwrap();
        lm.attach_lora(&mut store, &LoraConfig::default(), 1).unwrap();
        let set = lm.lora.as_ref().unwrap();
        assert_eq!(set.pairs.len(), 6);
        assert_eq!(set.num_params(), 1536);
        assert_eq!(store.num_trainable(), 1536);
    }

    #[test]
    fn unknown_target_rejected() {
        let mut store = ParamStore::new();
        let mut lm = TinyLm::new(&mut store, cfg(), 1).unwrap();
        let bad = LoraConfig {
            targets: vec!["q".into(), "out".into()],
            ..LoraConfig::default()
        };
        assert!(matches!(lm.attach_lora(&mut store, &bad, 1), Err(LmError::UnknownTarget(t)) if t == "out"));
    }

    #[test]
    fn scale_range_checked() {
        let mut store = ParamStore::new();
        let mut lm = TinyLm::new(&mut store, cfg(), 1).unwrap();
        assert!(lm.set_lora_scale(1.5).is_err());
        assert!(lm.set_lora_scale(-0.1).is_err());
        assert!(lm.set_lora_scale(0.25).is_ok());
    }

    #[test]
    fn overflow_reports_lengths() {
        let mut store = ParamStore::new();
        let lm = TinyLm::new(&mut store, cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[10, 8]));
        let err = lm.forward(&mut tape, &store, Some(p), &[1; 7]).unwrap_err();
        assert_eq!(err.to_string(), "sequence of 10 prefix vectors + 7 tokens exceeds max_seq_len 16");
    }

    #[test]
    fn prefix_rows_add_up() {
        let mut store = ParamStore::new();
        let lm = TinyLm::new(&mut store, cfg(), 1).unwrap();
        let mut rng = rng_for(0, "p");
        let prefix = normal_tensor(&mut rng, &[4, 8], 1.0);
        let l = logits(&lm, &store, Some(&prefix), &[1, 2, 3]);
        assert_eq!(l.shape(), &[7, 20]);
        assert_eq!(logits(&lm, &store, None, &[1, 2, 3]).shape(), &[3, 20]);
    }

    #[test]
    fn causal() {
        let mut store = ParamStore::new();
        let lm = TinyLm::new(&mut store, cfg(), 4).unwrap();
        let mut rng = rng_for(0, "p");
        let prefix = normal_tensor(&mut rng, &[3, 8], 1.0);
        let a = logits(&lm, &store, Some(&prefix), &[1, 2, 3, 4, 5]);
        let b = logits(&lm, &store, Some(&prefix), &[1, 2, 3, 9, 5]);
        // token 3 sits at joint position 3 + 3 = 6
        for r in 0..6 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(6), b.row(6));
    }

    #[test]
    fn greedy_is_deterministic_and_respects_budget() {
        let mut store = ParamStore::new();
        let lm = TinyLm::new(&mut store, cfg(), 2).unwrap();
        assert!(lm.generate_greedy(&store, None, &[1, 2], 0).unwrap().is_empty());
        let a = lm.generate_greedy(&store, None, &[1, 2], 5).unwrap();
        let b = lm.generate_greedy(&store, None, &[1, 2], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
    }

    #[test]
    fn lora_forward_properties() {
        let mut rng = rng_for(9, "lf");
        let x = normal_tensor(&mut rng, &[3, 6], 1.0);
        let w = normal_tensor(&mut rng, &[6, 5], 1.0);
        let a = normal_tensor(&mut rng, &[2, 6], 1.0);
        let b = normal_tensor(&mut rng, &[5, 2], 1.0);
        let base = crate::tensor::kernels::matmul(&x, &w).unwrap();
        assert_eq!(lora_forward(&x, &w, &a, &b, 4.0, 0.0).unwrap(), base);
        let zero_b = Tensor::zeros(&[5, 2]);
        assert_eq!(lora_forward(&x, &w, &a, &zero_b, 4.0, 0.7).unwrap(), base);
        let y0 = lora_forward(&x, &w, &a, &b, 4.0, 0.0).unwrap();
        let y1 = lora_forward(&x, &w, &a, &b, 4.0, 1.0).unwrap();
        let yh = lora_forward(&x, &w, &a, &b, 4.0, 0.5).unwrap();
        for i in 0..yh.numel() {
            let mid = (y0.data()[i] + y1.data()[i]) / 2.0;
            assert!((yh.data()[i] - mid).abs() < 1e-12);
        }
    }
}
