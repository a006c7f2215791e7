//! Paraphrase generators.
//!
//! The offline generator is a deterministic rule-based rewriter (synonym
//! substitution, clause fronting, prompt-specific openers and closers) that
//! never touches quoted spans. The remote generator speaks a JSON
//! request/response contract over HTTP:
//!
//! ```text
//! POST <endpoint>   {"prompt": "...", "seed_sentences": ["...", ...]}
//! 200               {"caption": "..."}
//! ```

use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::validate::Lexicon;

/// Environment variable that overrides the remote endpoint.
pub const ENDPOINT_ENV: &str = "DESTA_GENERATOR_URL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Offline,
    Remote,
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("remote generator failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("generator returned an empty caption")]
    Empty,
}

/// Wire request. `prompt_id` and `seed` stay local.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed_sentences: Vec<String>,
    #[serde(skip)]
    pub prompt_id: String,
    #[serde(skip)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct GenerationResponse {
    pub caption: String,
}

pub trait TextGenerator {
    fn kind(&self) -> GeneratorKind;
    fn generate(&self, request: &GenerationRequest) -> Result<String, GeneratorError>;
}

#[derive(Clone, Debug, Default)]
pub struct OfflineParaphraser {
    lexicon: Lexicon,
}

const MARK: char = '\u{1}';

impl OfflineParaphraser {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    fn synonym(&self, word: &str, rng: &mut ChaCha8Rng) -> Option<String> {
        let lower = word.to_lowercase();
        let alts = self.lexicon.synonyms.get(&lower)?;
        let pick = alts.choose(rng)?;
        let capital = word.chars().next().is_some_and(char::is_uppercase);
        Some(if capital { capitalize(pick) } else { pick.clone() })
    }

    fn substitute(&self, sentence: &str, rng: &mut ChaCha8Rng) -> String {
        sentence
            .split(' ')
            .map(|tok| {
                if tok.contains(MARK) {
                    return tok.to_string();
                }
                let end = tok
                    .char_indices()
                    .rev()
                    .find(|(_, c)| c.is_alphanumeric())
                    .map(|(i, c)| i + c.len_utf8())
                    .unwrap_or(0);
                let (word, tail) = tok.split_at(end);
                match self.synonym(word, rng) {
                    Some(w) => format!("{w}{tail}"),
                    None => tok.to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Lower-cases the first letter unless the sentence opens with a quoted span
/// or the pronoun "I".
fn decapitalize(s: &str) -> String {
    if s.starts_with(MARK) || s.starts_with("I ") {
        return s.to_string();
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Replaces each `"..."` span with an opaque marker.
fn protect_quotes(s: &str) -> (String, Vec<String>) {
    let mut out = String::new();
    let mut spans = Vec::new();
    let mut rest = s;
    while let Some(start) = rest.find('"') {
        let Some(len) = rest[start + 1..].find('"') else { break };
        let end = start + 1 + len + 1;
        out.push_str(&rest[..start]);
        out.push(MARK);
        out.push_str(&spans.len().to_string());
        out.push(MARK);
        spans.push(rest[start..end].to_string());
        rest = &rest[end..];
    }
    out.push_str(rest);
    (out, spans)
}

fn restore_quotes(mut s: String, spans: &[String]) -> String {
    for (i, span) in spans.iter().enumerate() {
        s = s.replace(&format!("{MARK}{i}{MARK}"), span);
    }
    s
}

/// Moves a trailing "at a ... / in a ... / with ..." clause to the front.
fn front_trailing_clause(sentence: &str) -> Option<String> {
    let body = sentence.strip_suffix('.')?;
    let cut = [" at a ", " in a ", " with "]
        .iter()
        .filter_map(|p| body.rfind(p))
        .max()?;
    let (rest, clause) = body.split_at(cut);
    let clause = clause.trim_start();
    if clause.contains(MARK) || clause.contains(',') || rest.trim().is_empty() {
        return None;
    }
    Some(format!("{}, {}.", capitalize(clause), decapitalize(rest.trim())))
}

impl TextGenerator for OfflineParaphraser {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Offline
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, GeneratorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let mut spans = Vec::new();
        let mut sentences = Vec::new();
        for s in &request.seed_sentences {
            let (masked, local) = protect_quotes(s);
            // re-number markers so they stay unique across sentences
            let mut masked = masked;
            for i in (0..local.len()).rev() {
                masked = masked.replace(
                    &format!("{MARK}{i}{MARK}"),
                    &format!("{MARK}{}{MARK}", spans.len() + i),
                );
            }
            spans.extend(local);
            let mut out = self.substitute(&masked, &mut rng);
            if rng.random_bool(0.5) {
                if let Some(fronted) = front_trailing_clause(&out) {
                    out = fronted;
                }
            }
            sentences.push(out);
        }
        let mut text = sentences.join(" ");
        if text.trim().is_empty() {
            return Err(GeneratorError::Empty);
        }
        let opener = self
            .lexicon
            .openers
            .get(&request.prompt_id)
            .and_then(|o| o.choose(&mut rng))
            .cloned()
            .unwrap_or_default();
        if !opener.is_empty() {
            text = format!("{opener}{}", decapitalize(&text));
        }
        if let Some(closer) = self
            .lexicon
            .closers
            .get(&request.prompt_id)
            .and_then(|c| c.choose(&mut rng))
        {
            text.push_str(closer);
        }
        Ok(restore_quotes(text, &spans))
    }
}

/// HTTP client for an external paraphrasing model.
#[derive(Clone, Debug)]
pub struct RemoteGenerator {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
}

impl RemoteGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            retries,
        }
    }

    /// Endpoint from [`ENDPOINT_ENV`] if set, else `configured`.
    pub fn resolve_endpoint(configured: Option<&str>) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| configured.map(str::to_string))
    }

    fn attempt(&self, agent: &ureq::Agent, request: &GenerationRequest) -> Result<String, String> {
        let mut resp = agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| e.to_string())?;
        let body: GenerationResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.caption.trim().is_empty() {
            return Err("empty caption".into());
        }
        Ok(body.caption)
    }
}

impl TextGenerator for RemoteGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Remote
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, GeneratorError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let attempts = self.retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(&agent, request) {
                Ok(c) => return Ok(c),
                Err(e) => {
                    log::warn!("remote generator attempt {}/{attempts}: {e}", i + 1);
                    last = e;
                }
            }
        }
        Err(GeneratorError::Exhausted { attempts, last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(seed: u64) -> GenerationRequest {
        GenerationRequest {
            prompt: "rewrite".into(),
            seed_sentences: vec!["A female speaker says \"the speaker says hi\" with joy emotion.".into()],
            prompt_id: "prm-vivid".into(),
            seed,
        }
    }

    #[test]
    fn quoted_span_survives_every_seed() {
        let g = OfflineParaphraser::default();
        for seed in 0..200 {
            let out = g.generate(&req(seed)).unwrap();
            assert!(out.contains("\"the speaker says hi\""), "{out}");
        }
    }

    #[test]
    fn same_seed_same_text() {
        let g = OfflineParaphraser::default();
        assert_eq!(g.generate(&req(9)).unwrap(), g.generate(&req(9)).unwrap());
    }

    #[test]
    fn seeds_produce_variety() {
        let g = OfflineParaphraser::default();
        let outs: std::collections::BTreeSet<_> =
            (0..50).map(|s| g.generate(&req(s)).unwrap()).collect();
        assert!(outs.len() > 5);
    }

    #[test]
    fn clause_fronting() {
        assert_eq!(
            front_trailing_clause("A speaker says \u{1}0\u{1} with joy emotion.").unwrap(),
            "With joy emotion, a speaker says \u{1}0\u{1}."
        );
        assert!(front_trailing_clause("no clause here.").is_none());
    }

    #[test]
    fn wire_request_has_only_contract_fields() {
        let v = serde_json::to_value(req(1)).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["prompt", "seed_sentences"]);
    }
}
