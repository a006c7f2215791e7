//! Encoder stub, modality adapter and language model sharing one parameter
//! store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterBody, AdapterConfig, AdapterError, ModalityAdapter};
use crate::encoder::{AudioFeatureFile, EncoderConfig, EncoderError, EncoderOutput, EncoderStub};
use crate::lm::{LmError, LoraConfig, TinyLm, TinyLmConfig};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match this model: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: TinyLmConfig,
    /// `None` builds the LoRA-free model.
    pub lora: Option<LoraConfig>,
}

#[derive(Clone, Debug)]
pub struct DestaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderStub,
    pub adapter: ModalityAdapter,
    pub lm: TinyLm,
}

impl DestaModel {
    /// Every component draws from its own seed stream, so attaching LoRA does
    /// not change the backbone or adapter initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let encoder = EncoderStub::new(config.encoder.clone(), seed)?;
        let mut store = ParamStore::new();
        let lm = TinyLm::new(&mut store, config.lm.clone(), seed)?;
        let adapter = ModalityAdapter::new(
            &mut store,
            &config.adapter,
            config.encoder.selected_layers(),
            config.encoder.dim,
            config.lm.d_model,
            seed,
        )?;
        let mut model = Self {
            config,
            store,
            encoder,
            adapter,
            lm,
        };
        if let Some(lora) = model.config.lora.clone() {
            model.lm.attach_lora(&mut model.store, &lora, seed)?;
        }
        Ok(model)
    }

    pub fn encode(&self, features: &AudioFeatureFile) -> Result<EncoderOutput> {
        Ok(self.encoder.encode(features)?)
    }

    /// Prefix embeddings for one encoded audio.
    pub fn prefix(&self, tape: &mut Tape, enc: &EncoderOutput) -> Result<Var> {
        Ok(self.adapter.forward(tape, &self.store, enc)?)
    }

    pub fn prefix_tensor(&self, enc: &EncoderOutput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.prefix(&mut tape, enc)?;
        Ok(tape.value(p)?.clone())
    }

    /// Logits over `[adapter(enc) ∥ tokens]`.
    pub fn logits(&self, tape: &mut Tape, enc: Option<&EncoderOutput>, tokens: &[u32]) -> Result<Var> {
        self.logits_in(&self.store, tape, enc, tokens)
    }

    /// As [`DestaModel::logits`], reading parameters from `store` instead of
    /// the model's own. Used by finite-difference checks.
    pub fn logits_in(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        enc: Option<&EncoderOutput>,
        tokens: &[u32],
    ) -> Result<Var> {
        let prefix = enc.map(|e| self.adapter.forward(tape, store, e)).transpose()?;
        Ok(self.lm.forward(tape, store, prefix, tokens)?)
    }

    pub fn generate(&self, enc: Option<&EncoderOutput>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let prefix = enc.map(|e| self.prefix_tensor(e)).transpose()?;
        Ok(self.lm.generate_greedy(&self.store, prefix.as_ref(), prompt, max_new)?)
    }

    pub fn set_lora_scale(&mut self, s: f64) -> Result<()> {
        Ok(self.lm.set_lora_scale(s)?)
    }

    pub fn prefix_len(&self) -> Result<usize> {
        Ok(self.adapter.output_len(self.config.encoder.frames)?)
    }

    /// Digest of every frozen weight: encoder stub plus LM backbone.
    pub fn frozen_digest(&self) -> ([u8; 32], [u8; 32]) {
        (self.encoder.digest(), self.store.frozen_digest())
    }

    /// Trainable parameters only: adapter and LoRA.
    pub fn trainable_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, |p| !p.frozen)
    }

    /// Loads a checkpoint. Frozen entries, if present, must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        for (name, entry) in &ckpt.entries {
            if entry.frozen {
                let id = self.store.id(name).map_err(|_| ModelError::Incompatible(format!("unknown `{name}`")))?;
                if self.store.tensor(id) != &entry.tensor {
                    return Err(ModelError::Incompatible(format!("frozen `{name}` differs")));
                }
            }
        }
        Ok(ckpt.apply_to(&mut self.store)?)
    }
}

/// Trainable parameter counts per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub components: BTreeMap<String, usize>,
    pub total: usize,
}

/// Component of a trainable parameter, from its name.
pub fn component_of(name: &str) -> &'static str {
    if name.starts_with("adapter.layer_weights") {
        "layer_weights"
    } else if name.starts_with("adapter.qformer.queries") {
        "qformer_queries"
    } else if name.starts_with("adapter.qformer.") {
        "qformer_blocks"
    } else if name.starts_with("adapter.cnn.") {
        "cnn"
    } else if name.starts_with("adapter.proj.") {
        "projection"
    } else if name.starts_with("lora.") {
        "lora"
    } else {
        "other"
    }
}

pub fn count_trainable_params(store: &ParamStore) -> ParamReport {
    let mut components = BTreeMap::new();
    for (_, p) in store.iter() {
        if !p.frozen {
            *components.entry(component_of(&p.name).to_string()).or_insert(0) += p.tensor.numel();
        }
    }
    let total = components.values().sum();
    ParamReport { components, total }
}

impl DestaModel {
    pub fn count_trainable_params(&self) -> ParamReport {
        count_trainable_params(&self.store)
    }

    pub fn adapter_kind_name(&self) -> &'static str {
        match self.adapter.body {
            AdapterBody::Cnn(_) => "cnn",
            AdapterBody::Qformer(_) => "qformer",
        }
    }
}
