//! Project configuration file (TOML). Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterKind};
use crate::caption::GeneratorKind;
use crate::encoder::EncoderConfig;
use crate::eval::SWEEP_SCALES;
use crate::lm::{LoraConfig, TinyLmConfig};
use crate::model::ModelConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub captions_per_audio: usize,
    pub generator: GeneratorKind,
    pub endpoint: Option<String>,
    pub timeout_s: f64,
    pub retries: usize,
    /// Fraction of skipped draws above which caption generation fails.
    pub max_skip_ratio: f64,
    pub prompts: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// One training instruction per line.
    pub caption_prompts: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            captions_per_audio: 3,
            generator: GeneratorKind::Offline,
            endpoint: None,
            timeout_s: 30.0,
            retries: 2,
            max_skip_ratio: 0.5,
            prompts: None,
            templates: None,
            lexicon: None,
            caption_prompts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub sweep: Vec<f64>,
    /// Used by `synth-tasks`.
    pub samples_per_instance: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            sweep: SWEEP_SCALES.to_vec(),
            samples_per_instance: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of `<audio_id>.feat` files; synthetic features when unset.
    pub features_dir: Option<PathBuf>,
    /// Frame count for synthetic features at normal speed.
    pub synthetic_frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: TinyLmConfig,
    /// `rank = 0` disables the LoRA branch.
    pub lora: LoraConfig,
    pub trainer: TrainerConfig,
    /// Second optimiser profile for instruction tuning.
    pub instruct: TrainerConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            lm: TinyLmConfig::default(),
            lora: LoraConfig::default(),
            trainer: TrainerConfig::default(),
            instruct: TrainerConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ProjectConfig {
    /// Desk-scale defaults: 4-layer 16-wide encoder over 50 frames, 2-layer
    /// 32-wide LM, rank-4 LoRA on q/k/v. Learning rates are raised for the
    /// tiny model.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.trainer.lr_max = 1e-2;
        c.trainer.lr_min = 1e-4;
        c.trainer.batch_size = 4;
        c.instruct = c.trainer.clone();
        c
    }

    /// Settings that let a single batch of four captions be memorised quickly.
    pub fn overfit() -> Self {
        let mut c = Self::toy();
        c.adapter.qformer.num_queries = 8;
        c.lora.rank = 16;
        c.lora.alpha = 32.0;
        // Cosine decay matters here: a constant rate stalls around 0.4.
        c.trainer.lr_max = 2.5e-2;
        c.trainer.lr_min = 1e-4;
        c.trainer.batch_size = 4;
        c.trainer.epochs = 500;
        c
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { msg, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.encoder.validate().map_err(|e| bad(&e))?;
        self.lm.validate().map_err(|e| bad(&e))?;
        self.trainer.validate().map_err(|e| bad(&e))?;
        self.instruct.validate().map_err(|e| bad(&e))?;
        if !(0.0..=1.0).contains(&self.pipeline.max_skip_ratio) {
            return Err(ConfigError::Invalid("pipeline.max_skip_ratio must be in [0, 1]".into()));
        }
        if let Some(s) = self.eval.sweep.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(ConfigError::Invalid(format!("eval.sweep scale {s} outside [0, 1]")));
        }
        Ok(())
    }

    /// Model configuration with the adapter kind optionally overridden. A
    /// LoRA rank of zero means no LoRA branch.
    pub fn model_config(&self, adapter: Option<AdapterKind>) -> ModelConfig {
        let mut a = self.adapter.clone();
        if let Some(k) = adapter {
            a.kind = k;
        }
        ModelConfig {
            encoder: self.encoder.clone(),
            adapter: a,
            lm: self.lm.clone(),
            lora: (self.lora.rank > 0).then(|| self.lora.clone()),
        }
    }
}
