use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;

use super::example::{assemble_input, TrainingExample};
use super::{Result, TrainError};
use crate::caption::{CaptionRecord, MetadataRecord};
use crate::encoder::{synthesize_features, AudioFeatureFile, EncoderOutput, TranscriptStore};
use crate::model::DestaModel;
use crate::rng::rng_for;
use crate::tokenizer::Tokenizer;

/// A training example with its (frozen, precomputed) encoder output.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub audio_id: String,
    pub enc: Arc<EncoderOutput>,
    pub example: TrainingExample,
}

/// Where raw audio features come from.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    /// Attribute-dependent synthetic features from the metadata.
    Synthetic { base_frames: usize, seed: u64 },
    /// `<dir>/<audio_id>.feat` files.
    Dir(PathBuf),
}

impl FeatureSource {
    pub fn load(&self, record: &MetadataRecord, feature_dim: usize) -> Result<AudioFeatureFile> {
        match self {
            FeatureSource::Synthetic { base_frames, seed } => {
                Ok(synthesize_features(record, feature_dim, *base_frames, *seed))
            }
            FeatureSource::Dir(dir) => {
                let path = dir.join(format!("{}.feat", record.audio_id));
                AudioFeatureFile::load(&path).map_err(|e| TrainError::Data(e.to_string()))
            }
        }
    }
}

/// Encodes each referenced audio once.
pub(crate) struct EncoderCache<'a> {
    model: &'a DestaModel,
    features: &'a FeatureSource,
    by_id: BTreeMap<&'a str, &'a MetadataRecord>,
    cache: BTreeMap<String, Arc<EncoderOutput>>,
}

impl<'a> EncoderCache<'a> {
    pub(crate) fn new(model: &'a DestaModel, metadata: &'a [MetadataRecord], features: &'a FeatureSource) -> Self {
        Self {
            model,
            features,
            by_id: metadata.iter().map(|r| (r.audio_id.as_str(), r)).collect(),
            cache: BTreeMap::new(),
        }
    }

    pub(crate) fn get(&mut self, audio_id: &str) -> Result<Arc<EncoderOutput>> {
        if let Some(e) = self.cache.get(audio_id) {
            return Ok(e.clone());
        }
        let record = self
            .by_id
            .get(audio_id)
            .ok_or_else(|| TrainError::Data(format!("no metadata for audio `{audio_id}`")))?;
        let file = self.features.load(record, self.model.config.encoder.feature_dim)?;
        let enc = Arc::new(self.model.encode(&file)?);
        self.cache.insert(audio_id.to_string(), enc.clone());
        Ok(enc)
    }
}

/// Builds caption-training items. Each caption gets a training prompt drawn
/// from `prompts` by a seeded per-caption choice.
pub fn caption_items(
    model: &DestaModel,
    tok: &Tokenizer,
    captions: &[CaptionRecord],
    metadata: &[MetadataRecord],
    prompts: &[String],
    features: &FeatureSource,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    if prompts.is_empty() {
        return Err(TrainError::Data("no training prompts configured".into()));
    }
    let transcripts = TranscriptStore::from_records(metadata);
    let mut cache = EncoderCache::new(model, metadata, features);
    let prefix_len = model.prefix_len()?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(captions.len());
    for c in captions {
        let n = seen.entry(c.audio_id.as_str()).or_insert(0);
        let i = *n;
        *n += 1;
        let transcript = transcripts
            .transcribe_lookup(&c.audio_id)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        let p = rng_for(seed, &format!("train-prompt/{}/{i}", c.audio_id)).random_range(0..prompts.len());
        let example = assemble_input(
            tok,
            prefix_len,
            transcript,
            &prompts[p],
            &c.caption,
            model.config.lm.max_seq_len,
        )?;
        out.push(TrainItem {
            id: format!("{}#{i}", c.audio_id),
            audio_id: c.audio_id.clone(),
            enc: cache.get(&c.audio_id)?,
            example,
        });
    }
    Ok(out)
}

/// First `n` items whose inputs differ pairwise. Two captions of one audio
/// that drew the same training prompt have identical inputs and different
/// targets, which no model can fit exactly; a memorisation check must avoid
/// such pairs.
pub fn distinct_batch(items: &[TrainItem], n: usize) -> Vec<TrainItem> {
    let mut used: Vec<(&str, &[u32])> = Vec::new();
    let mut out = Vec::with_capacity(n);
    for it in items {
        if out.len() == n {
            break;
        }
        let key = (it.audio_id.as_str(), it.example.conditioning());
        if !used.contains(&key) {
            used.push(key);
            out.push(it.clone());
        }
    }
    out
}

/// One instruction/response pair about an audio.
#[derive(Clone, Debug)]
pub struct InstructionPair {
    pub id: String,
    pub audio_id: String,
    pub instruction: String,
    pub response: String,
}

/// Builds instruction-tuning items with the same layout as captions.
pub fn instruction_items(
    model: &DestaModel,
    tok: &Tokenizer,
    pairs: &[InstructionPair],
    metadata: &[MetadataRecord],
    features: &FeatureSource,
) -> Result<Vec<TrainItem>> {
    let transcripts = TranscriptStore::from_records(metadata);
    let mut cache = EncoderCache::new(model, metadata, features);
    let prefix_len = model.prefix_len()?;
    pairs
        .iter()
        .map(|p| {
            let transcript = transcripts
                .transcribe_lookup(&p.audio_id)
                .map_err(|e| TrainError::Data(e.to_string()))?;
            Ok(TrainItem {
                id: p.id.clone(),
                audio_id: p.audio_id.clone(),
                enc: cache.get(&p.audio_id)?,
                example: assemble_input(
                    tok,
                    prefix_len,
                    transcript,
                    &p.instruction,
                    &p.response,
                    model.config.lm.max_seq_len,
                )?,
            })
        })
        .collect()
}
