//! Bridge from frozen encoder layers to the language model's embedding space:
//! softmax-weighted layer sum, then a CNN or Q-former body, then a projection.

mod cnn;
mod qformer;

pub use cnn::{CnnAdapter, CnnAdapterConfig};
pub use qformer::{Qformer, QformerConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderOutput;
use crate::nn::Linear;
use crate::rng::rng_for;
use crate::tensor::{kernels, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("encoder output has {got} layers, layer weights expect {expected}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error("input has {frames} frames; the CNN adapter needs at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Cnn,
    #[default]
    Qformer,
}

impl std::str::FromStr for AdapterKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "qformer" => Ok(Self::Qformer),
            other => Err(format!("unknown adapter `{other}` (expected cnn or qformer)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub cnn: CnnAdapterConfig,
    pub qformer: QformerConfig,
}

/// Learnable logits over encoder layers. Effective weights are their softmax.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub logits: ParamId,
    pub num_layers: usize,
}

impl LayerWeights {
    pub fn new(store: &mut ParamStore, name: &str, num_layers: usize) -> Result<Self> {
        let logits = store.add(name, Tensor::zeros(&[num_layers]), false)?;
        Ok(Self { logits, num_layers })
    }

    pub fn effective(&self, store: &ParamStore) -> Vec<f64> {
        let l = store.tensor(self.logits).data().to_vec();
        let row = Tensor::new(&[1, l.len()], l).expect("rank-1 logits");
        kernels::softmax(&row).expect("rank-2 row").into_data()
    }
}

/// `Σₗ softmax(w)ₗ · layerₗ`, recorded on the tape so the logits get gradients.
pub fn weighted_layer_sum(tape: &mut Tape, store: &ParamStore, enc: &EncoderOutput, w: &LayerWeights) -> Result<Var> {
    if enc.layers.len() != w.num_layers {
        return Err(AdapterError::LayerMismatch {
            expected: w.num_layers,
            got: enc.layers.len(),
        });
    }
    let (t, d) = (enc.frames(), enc.dim());
    if let Some(bad) = enc.layers.iter().find(|l| l.shape() != [t, d]) {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_layer_sum",
            lhs: vec![t, d],
            rhs: bad.shape().to_vec(),
        }
        .into());
    }
    // Stack layers as rows of an L × (T·D) matrix and mix with a 1 × L row.
    let mut stacked = Vec::with_capacity(w.num_layers * t * d);
    for l in &enc.layers {
        stacked.extend_from_slice(l.data());
    }
    let stacked = tape.constant(Tensor::new(&[w.num_layers, t * d], stacked)?);
    let logits = tape.param(store, w.logits);
    let logits = tape.reshape(logits, &[1, w.num_layers])?;
    let weights = tape.softmax(logits)?;
    let mixed = tape.matmul(weights, stacked)?;
    Ok(tape.reshape(mixed, &[t, d])?)
}

#[derive(Clone, Debug)]
pub enum AdapterBody {
    Cnn(CnnAdapter),
    Qformer(Qformer),
}

/// Layer weights, body and output projection, all trainable.
#[derive(Clone, Debug)]
pub struct ModalityAdapter {
    pub layer_weights: LayerWeights,
    pub body: AdapterBody,
    pub projection: Linear,
}

impl ModalityAdapter {
    /// Registers every adapter parameter in `store` under `adapter.`.
    pub fn new(
        store: &mut ParamStore,
        cfg: &AdapterConfig,
        num_layers: usize,
        encoder_dim: usize,
        llm_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "adapter");
        let layer_weights = LayerWeights::new(store, "adapter.layer_weights", num_layers)?;
        let (body, body_out) = match cfg.kind {
            AdapterKind::Cnn => {
                let c = CnnAdapter::new(store, "adapter.cnn", &cfg.cnn, encoder_dim, &mut rng)?;
                (AdapterBody::Cnn(c), cfg.cnn.mid_channels)
            }
            AdapterKind::Qformer => {
                let q = Qformer::new(store, "adapter.qformer", &cfg.qformer, encoder_dim, &mut rng)?;
                (AdapterBody::Qformer(q), cfg.qformer.d_model)
            }
        };
        let projection = Linear::new(store, "adapter.proj", body_out, llm_dim, &mut rng, false)?;
        Ok(Self {
            layer_weights,
            body,
            projection,
        })
    }

    /// Prefix embeddings `S × D_llm` for one encoded audio.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, enc: &EncoderOutput) -> Result<Var> {
        let x = weighted_layer_sum(tape, store, enc, &self.layer_weights)?;
        let h = match &self.body {
            AdapterBody::Cnn(c) => c.forward(tape, store, x)?,
            AdapterBody::Qformer(q) => q.forward(tape, store, x)?,
        };
        Ok(self.projection.forward(tape, store, h)?)
    }

    /// Output length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> Result<usize> {
        match &self.body {
            AdapterBody::Cnn(c) => c.output_len(frames),
            AdapterBody::Qformer(q) => Ok(q.num_queries),
        }
    }
}

/// Plain-tensor `x·W + b`.
pub fn project(store: &ParamStore, projection: &Linear, x: &Tensor) -> Result<Tensor> {
    Ok(projection.apply(store, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn enc(l: usize, t: usize, d: usize, seed: u64) -> EncoderOutput {
        let mut rng = rng_for(seed, "enc");
        EncoderOutput {
            layers: (0..l).map(|_| normal_tensor(&mut rng, &[t, d], 1.0)).collect(),
        }
    }

    fn sum_with(logits: Vec<f64>, e: &EncoderOutput) -> Tensor {
        let mut store = ParamStore::new();
        let w = LayerWeights::new(&mut store, "w", logits.len()).unwrap();
        store.get_mut(w.logits).tensor = Tensor::new(&[logits.len()], logits).unwrap();
        let mut tape = Tape::new();
        let v = weighted_layer_sum(&mut tape, &store, e, &w).unwrap();
        tape.value(v).unwrap().clone()
    }

    #[test]
    fn saturated_logit_selects_layer() {
        let e = enc(3, 5, 4, 1);
        let out = sum_with(vec![0.0, 40.0, 0.0], &e);
        assert!(out.max_abs_diff(&e.layers[1]) < 1e-12);
    }

    #[test]
    fn uniform_two_layers_is_mean() {
        let e = enc(2, 4, 3, 2);
        let out = sum_with(vec![0.0, 0.0], &e);
        for (i, v) in out.data().iter().enumerate() {
            let mean = (e.layers[0].data()[i] + e.layers[1].data()[i]) / 2.0;
            assert!((v - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_count_mismatch() {
        let e = enc(3, 2, 2, 3);
        let mut store = ParamStore::new();
        let w = LayerWeights::new(&mut store, "w", 4).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            weighted_layer_sum(&mut tape, &store, &e, &w),
            Err(AdapterError::LayerMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn effective_weights_sum_to_one() {
        let mut store = ParamStore::new();
        let w = LayerWeights::new(&mut store, "w", 5).unwrap();
        store.get_mut(w.logits).tensor = Tensor::new(&[5], vec![3.0, -1.0, 0.5, 9.0, -20.0]).unwrap();
        let eff = w.effective(&store);
        assert!((eff.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(eff.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn identity_and_zero_projection() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(0, "p");
        let lin = Linear::new(&mut store, "p", 4, 4, &mut rng, false).unwrap();
        let x = normal_tensor(&mut rng, &[3, 4], 1.0);
        store.get_mut(lin.w).tensor = Tensor::eye(4);
        assert_eq!(project(&store, &lin, &x).unwrap(), x);
        store.get_mut(lin.w).tensor = Tensor::zeros(&[4, 4]);
        let b = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        store.get_mut(lin.b).tensor = b.clone();
        let y = project(&store, &lin, &x).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), b.data());
        }
    }
}
