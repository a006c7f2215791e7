//! Speech-caption dataset synthesis from per-audio metadata.

mod dataset;
mod generator;
mod metadata;
mod synth;
mod template;
mod validate;

pub use dataset::{
    compute_manifest_stats, draw_pair, generate_captions, generate_dataset, CaptionBatch,
    CaptionRecord, CaptionResources, DatasetManifest, ManifestStats, PromptSpec, SkipNote,
    SourceCounts,
};
pub use generator::{
    GenerationRequest, GenerationResponse, GeneratorError, GeneratorKind, OfflineParaphraser,
    RemoteGenerator, TextGenerator, ENDPOINT_ENV,
};
pub use metadata::{check_records, Gender, MetadataRecord, Pitch, Speed, Volume};
pub use synth::synthesize_metadata;
pub use template::{expand_template, Template, PLACEHOLDERS};
pub use validate::{normalize_for_containment, validate_caption, Lexicon, ValidationReport};

use thiserror::Error;

use crate::tokenizer::Tokenizer;

const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.jsonl");
const DEFAULT_PROMPTS: &str = include_str!("../../data/prompts.jsonl");
const DEFAULT_CAPTION_PROMPTS: &str = include_str!("../../data/caption_prompts.txt");

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("record `{audio_id}`: {msg}")]
    InvalidRecord { audio_id: String, msg: String },
    #[error("template `{id}`: {msg}")]
    BadTemplate { id: String, msg: String },
    #[error("template `{template}`: mandatory placeholder [{placeholder}] is unspecified")]
    Unresolvable {
        template: String,
        placeholder: String,
    },
    #[error("{path}: {msg}")]
    Data { path: String, msg: String },
}

pub fn default_templates() -> Vec<Template> {
    let raw: Vec<Template> = crate::jsonl::parse_str(DEFAULT_TEMPLATES).expect("shipped templates parse");
    raw.into_iter()
        .map(|t| Template::new(t.id, t.pattern).expect("shipped templates are valid"))
        .collect()
}

pub fn default_prompts() -> Vec<PromptSpec> {
    crate::jsonl::parse_str(DEFAULT_PROMPTS).expect("shipped prompts parse")
}

/// Instructions used as the text prompt during caption training.
pub fn default_caption_prompts() -> Vec<String> {
    DEFAULT_CAPTION_PROMPTS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

impl Default for CaptionResources {
    fn default() -> Self {
        Self {
            prompts: default_prompts(),
            templates: default_templates(),
            lexicon: Lexicon::default(),
            tokenizer: Tokenizer::default(),
        }
    }
}

pub fn load_templates(path: &std::path::Path) -> Result<Vec<Template>, CaptionError> {
    let raw: Vec<Template> = crate::jsonl::read(path).map_err(|e| CaptionError::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    raw.into_iter().map(|t| Template::new(t.id, t.pattern)).collect()
}

pub fn load_prompts(path: &std::path::Path) -> Result<Vec<PromptSpec>, CaptionError> {
    crate::jsonl::read(path).map_err(|e| CaptionError::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_data_shape() {
        assert_eq!(default_templates().len(), 5);
        assert_eq!(default_prompts().len(), 3);
        let cp = default_caption_prompts();
        assert!(cp.contains(&"Describe the speech.".to_string()));
        assert!(cp.contains(&"What can be inferred from this audio?".to_string()));
        assert!(default_templates().iter().all(Template::has_text));
    }
}
