use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{exact_match, zero_shot_metrics, FollowDetector, InstanceResult, ZeroShotReport, ZeroShotResponse};
use super::tasks::TaskInstance;
use super::{EvalError, Result};
use crate::caption::MetadataRecord;
use crate::encoder::{EncoderOutput, TranscriptStore};
use crate::model::DestaModel;
use crate::tokenizer::Tokenizer;
use crate::trainer::{instruction_prompt, EncoderCache, FeatureSource};

/// Anything that answers an instruction about an audio.
pub trait InstructionModel {
    fn set_lora_scale(&mut self, s: f64) -> Result<()>;
    fn respond(&mut self, audio_id: &str, instruction: &str) -> Result<String>;
}

/// Greedy-decoding adapter around [`DestaModel`], using the same input
/// layout as training: `prefix ∥ BOS ∥ transcript ∥ instruction`.
pub struct DestaResponder<'m> {
    model: &'m mut DestaModel,
    tok: Tokenizer,
    transcripts: TranscriptStore,
    encoded: BTreeMap<String, Arc<EncoderOutput>>,
    max_new_tokens: usize,
}

impl<'m> DestaResponder<'m> {
    /// Encodes every audio referenced by `tasks` up front; encoder outputs do
    /// not depend on the LoRA scale.
    pub fn new(
        model: &'m mut DestaModel,
        tok: Tokenizer,
        tasks: &[TaskInstance],
        metadata: &[MetadataRecord],
        features: &FeatureSource,
        max_new_tokens: usize,
    ) -> Result<Self> {
        let mut encoded = BTreeMap::new();
        {
            let mut cache = EncoderCache::new(model, metadata, features);
            for s in tasks.iter().flat_map(|t| &t.samples) {
                if !encoded.contains_key(&s.audio_id) {
                    encoded.insert(s.audio_id.clone(), cache.get(&s.audio_id)?);
                }
            }
        }
        Ok(Self {
            model,
            tok,
            transcripts: TranscriptStore::from_records(metadata),
            encoded,
            max_new_tokens,
        })
    }
}

impl InstructionModel for DestaResponder<'_> {
    fn set_lora_scale(&mut self, s: f64) -> Result<()> {
        if self.model.lm.lora_scale().is_none() {
            // A LoRA-free model is the s = 0 model; other scales are meaningless.
            return if s == 0.0 {
                Ok(())
            } else {
                Err(EvalError::Scale(format!("model has no LoRA branch; cannot use scale {s}")))
            };
        }
        self.model.set_lora_scale(s).map_err(|e| EvalError::Scale(e.to_string()))
    }

    fn respond(&mut self, audio_id: &str, instruction: &str) -> Result<String> {
        let enc = self
            .encoded
            .get(audio_id)
            .ok_or_else(|| EvalError::Invalid(format!("audio `{audio_id}` was not encoded")))?;
        let transcript = self.transcripts.transcribe_lookup(audio_id)?;
        let prompt = instruction_prompt(&self.tok, transcript, instruction);
        let out = self.model.generate(Some(enc), &prompt, self.max_new_tokens)?;
        Ok(self.tok.decode(&out))
    }
}

/// A single model answer to a single sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub sample: usize,
    pub audio_id: String,
    pub prediction: String,
    pub label: String,
    pub correct: bool,
}

/// Exact-match accuracy per instance, plus every prediction.
pub fn evaluate_instances(
    model: &mut dyn InstructionModel,
    tasks: &[TaskInstance],
) -> Result<(Vec<InstanceResult>, Vec<Prediction>)> {
    super::tasks::validate_tasks(tasks)?;
    let mut results = Vec::with_capacity(tasks.len());
    let mut predictions = Vec::new();
    for t in tasks {
        let mut correct = 0;
        for (i, s) in t.samples.iter().enumerate() {
            let text = model.respond(&s.audio_id, &s.instruction)?;
            let ok = exact_match(&text, &s.label, s.options.as_deref());
            correct += ok as usize;
            predictions.push(Prediction {
                instance_id: t.instance_id.clone(),
                sample: i,
                audio_id: s.audio_id.clone(),
                prediction: text,
                label: s.label.clone(),
                correct: ok,
            });
        }
        results.push(InstanceResult::from_counts(
            t.instance_id.clone(),
            t.dimension,
            t.split,
            correct,
            t.samples.len(),
        )?);
    }
    Ok((results, predictions))
}

/// Zero-shot responses for every sample, with allowed answers attached.
pub fn zero_shot_responses(model: &mut dyn InstructionModel, tasks: &[TaskInstance]) -> Result<Vec<ZeroShotResponse>> {
    super::tasks::validate_tasks(tasks)?;
    let mut out = Vec::new();
    for t in tasks {
        for (i, s) in t.samples.iter().enumerate() {
            out.push(ZeroShotResponse {
                question_id: format!("{}/{i}", t.instance_id),
                text: model.respond(&s.audio_id, &s.instruction)?,
                label: s.label.clone(),
                allowed: s.allowed(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub report: ZeroShotReport,
}

/// One zero-shot report per LoRA scale, in the order given.
pub fn lora_scale_sweep(
    model: &mut dyn InstructionModel,
    tasks: &[TaskInstance],
    scales: &[f64],
    detector: &dyn FollowDetector,
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = scales.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::Scale(format!("scale {bad} outside [0, 1]")));
    }
    scales
        .iter()
        .map(|&scale| {
            model.set_lora_scale(scale)?;
            let responses = zero_shot_responses(model, tasks)?;
            let report = zero_shot_metrics(&responses, detector)?;
            log::info!(
                "sweep scale {scale}: follow {:.2} success {:.2}",
                report.following_rate,
                report.success_rate
            );
            Ok(SweepRow { scale, report })
        })
        .collect()
}
