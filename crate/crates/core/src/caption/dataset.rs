use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::{GenerationRequest, GeneratorKind, TextGenerator};
use super::metadata::MetadataRecord;
use super::template::{expand_template, Template};
use super::validate::{validate_caption, Lexicon};
use crate::rng::rng_for;
use crate::tokenizer::Tokenizer;

/// Paraphrasing instruction sent to the generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub id: String,
    pub text: String,
}

/// One generated caption. `corpus` and `duration_s` are carried from the
/// metadata so manifest statistics need no second input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub audio_id: String,
    pub caption: String,
    pub template_id: String,
    pub prompt_id: String,
    pub generator: GeneratorKind,
    pub token_count: usize,
    #[serde(default = "default_corpus")]
    pub corpus: String,
    #[serde(default)]
    pub duration_s: f64,
}

fn default_corpus() -> String {
    "default".into()
}

/// A draw that produced no record, with the reason it was dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkipNote {
    pub audio_id: String,
    pub draw: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct CaptionBatch {
    pub records: Vec<CaptionRecord>,
    pub skipped: Vec<SkipNote>,
}

/// `(prompt index, template index)` for draw `draw` of `audio_id`.
pub fn draw_pair(seed: u64, audio_id: &str, draw: usize, prompts: usize, templates: usize) -> (usize, usize) {
    let mut rng = rng_for(seed, &format!("caption/{audio_id}/{draw}"));
    (rng.random_range(0..prompts), rng.random_range(0..templates))
}

fn draw_generator_seed(seed: u64, audio_id: &str, draw: usize) -> u64 {
    rng_for(seed, &format!("paraphrase/{audio_id}/{draw}")).random()
}

/// Everything needed to caption records besides the generator.
#[derive(Clone, Debug)]
pub struct CaptionResources {
    pub prompts: Vec<PromptSpec>,
    pub templates: Vec<Template>,
    pub lexicon: Lexicon,
    pub tokenizer: Tokenizer,
}

/// Generates up to `n` captions for one record.
///
/// Each draw picks a (prompt, template) pair uniformly, expands the template,
/// asks the generator for a paraphrase, validates it and drops duplicates.
/// Every dropped draw is reported in `skipped` and logged.
pub fn generate_captions(
    record: &MetadataRecord,
    res: &CaptionResources,
    n: usize,
    generator: &dyn TextGenerator,
    seed: u64,
) -> CaptionBatch {
    let mut batch = CaptionBatch::default();
    let mut seen = BTreeSet::new();
    if res.prompts.is_empty() || res.templates.is_empty() {
        for draw in 0..n {
            batch.skipped.push(SkipNote {
                audio_id: record.audio_id.clone(),
                draw,
                reason: "no prompts or templates configured".into(),
            });
        }
        return batch;
    }
    for draw in 0..n {
        let (pi, ti) = draw_pair(seed, &record.audio_id, draw, res.prompts.len(), res.templates.len());
        let (prompt, template) = (&res.prompts[pi], &res.templates[ti]);
        let mut skip = |reason: String| {
            log::warn!("skipping {} draw {draw}: {reason}", record.audio_id);
            batch.skipped.push(SkipNote {
                audio_id: record.audio_id.clone(),
                draw,
                reason,
            });
        };
        let sentence = match expand_template(record, template) {
            Ok(s) => s,
            Err(e) => {
                skip(format!("template: {e}"));
                continue;
            }
        };
        let request = GenerationRequest {
            prompt: prompt.text.clone(),
            seed_sentences: vec![sentence],
            prompt_id: prompt.id.clone(),
            seed: draw_generator_seed(seed, &record.audio_id, draw),
        };
        let caption = match generator.generate(&request) {
            Ok(c) => c,
            Err(e) => {
                skip(format!("generator: {e}"));
                continue;
            }
        };
        let report = validate_caption(&caption, record, &res.lexicon);
        if !report.passed() {
            skip(format!("validation: {}", report.reasons.join(",")));
            continue;
        }
        if !seen.insert(caption.clone()) {
            skip("duplicate caption".into());
            continue;
        }
        batch.records.push(CaptionRecord {
            audio_id: record.audio_id.clone(),
            token_count: res.tokenizer.token_count(&caption),
            caption,
            template_id: template.id.clone(),
            prompt_id: prompt.id.clone(),
            generator: generator.kind(),
            corpus: record.corpus.clone(),
            duration_s: record.duration_s,
        });
    }
    batch
}

/// Captions every record, ordered by `(audio_id, draw)` regardless of the
/// input order.
pub fn generate_dataset(
    records: &[MetadataRecord],
    res: &CaptionResources,
    n: usize,
    generator: &dyn TextGenerator,
    seed: u64,
) -> CaptionBatch {
    let mut order: Vec<&MetadataRecord> = records.iter().collect();
    order.sort_by(|a, b| (&a.audio_id, &a.corpus).cmp(&(&b.audio_id, &b.corpus)));
    let mut out = CaptionBatch::default();
    for r in order {
        let b = generate_captions(r, res, n, generator, seed);
        out.records.extend(b.records);
        out.skipped.extend(b.skipped);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub audios: usize,
    pub captions: usize,
    pub duration_h: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub num_audios: usize,
    pub num_captions: usize,
    pub total_duration_h: f64,
    pub avg_tokens: f64,
    /// Set when the manifest had no records.
    pub empty: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<CaptionRecord>,
    pub sources: BTreeMap<String, SourceCounts>,
    pub stats: ManifestStats,
}

impl DatasetManifest {
    pub fn new(records: Vec<CaptionRecord>) -> Self {
        let (stats, sources) = compute_manifest_stats_with_sources(&records);
        Self {
            records,
            sources,
            stats,
        }
    }
}

/// Counts, total duration over distinct audios, and mean token count.
pub fn compute_manifest_stats(records: &[CaptionRecord]) -> ManifestStats {
    compute_manifest_stats_with_sources(records).0
}

fn compute_manifest_stats_with_sources(
    records: &[CaptionRecord],
) -> (ManifestStats, BTreeMap<String, SourceCounts>) {
    if records.is_empty() {
        return (
            ManifestStats {
                empty: true,
                ..ManifestStats::default()
            },
            BTreeMap::new(),
        );
    }
    let mut audios: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut sources: BTreeMap<String, SourceCounts> = BTreeMap::new();
    let mut tokens = 0usize;
    for r in records {
        tokens += r.token_count;
        let src = sources.entry(r.corpus.clone()).or_default();
        src.captions += 1;
        if audios
            .insert((r.corpus.as_str(), r.audio_id.as_str()), r.duration_s)
            .is_none()
        {
            src.audios += 1;
            src.duration_h += r.duration_s / 3600.0;
        }
    }
    let total_s: f64 = audios.values().sum();
    (
        ManifestStats {
            num_audios: audios.len(),
            num_captions: records.len(),
            total_duration_h: total_s / 3600.0,
            avg_tokens: tokens as f64 / records.len() as f64,
            empty: false,
        },
        sources,
    )
}
