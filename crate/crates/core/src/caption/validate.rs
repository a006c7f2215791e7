//! Mechanical hallucination checks on generated captions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metadata::MetadataRecord;
use super::CaptionError;

const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.json");

/// Antonym and paraphrase vocabulary.
///
/// `contradictions[attribute][value]` lists phrases that must not appear in a
/// caption whose record has that attribute value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub contradictions: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub openers: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub closers: BTreeMap<String, Vec<String>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_LEXICON).expect("shipped lexicon parses")
    }
}

impl Lexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CaptionError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| CaptionError::Data {
            path: path.as_ref().display().to_string(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CaptionError::Data {
            path: path.as_ref().display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn contradicting(&self, attribute: &str, value: &str) -> &[String] {
        self.contradictions
            .get(attribute)
            .and_then(|m| m.get(value))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub reasons: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.reasons.is_empty()
    }
}

const QUOTES: [char; 9] = ['"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '\u{ab}', '\u{bb}', '`'];

/// Drops quote characters and collapses whitespace runs to single spaces.
pub fn normalize_for_containment(s: &str) -> String {
    s.chars()
        .filter(|c| !QUOTES.contains(c))
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// Checks that the caption quotes the transcript and does not contradict any
/// specified categorical attribute. The transcript itself is excluded from
/// the contradiction scan.
pub fn validate_caption(caption: &str, record: &MetadataRecord, lexicon: &Lexicon) -> ValidationReport {
    let mut reasons = Vec::new();
    let norm_caption = normalize_for_containment(caption);
    let norm_transcript = normalize_for_containment(&record.transcript);
    if norm_transcript.is_empty() || !norm_caption.contains(&norm_transcript) {
        reasons.push("transcript-missing".to_string());
    }
    let outside = if norm_transcript.is_empty() {
        norm_caption.clone()
    } else {
        norm_caption.replace(&norm_transcript, " ")
    };
    let caption_words = words(&outside);
    for (attribute, value) in record.categorical() {
        let hit = lexicon
            .contradicting(attribute, value)
            .iter()
            .any(|phrase| contains_phrase(&caption_words, &words(phrase)));
        if hit {
            reasons.push(format!("attribute-contradiction:{attribute}"));
        }
    }
    ValidationReport { reasons }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::metadata::{Gender, Pitch};

    fn record() -> MetadataRecord {
        let mut r = MetadataRecord::new("a", "Of course not, said he");
        r.gender = Gender::Female;
        r.pitch = Pitch::Low;
        r
    }

    #[test]
    fn consistent_caption_passes() {
        let lex = Lexicon::default();
        let c = "A female speaker with a low pitch says \u{201c}Of course not,  said he\u{201d}.";
        let report = validate_caption(c, &record(), &lex);
        assert!(report.passed(), "{:?}", report.reasons);
    }

    #[test]
    fn missing_transcript_fails() {
        let lex = Lexicon::default();
        let r = validate_caption("A female speaker talks.", &record(), &lex);
        assert_eq!(r.reasons, vec!["transcript-missing"]);
    }

    #[test]
    fn gender_contradiction_detected_outside_transcript_only() {
        let lex = Lexicon::default();
        // "he" inside the transcript is fine
        let ok = validate_caption("She says \"Of course not, said he\".", &record(), &lex);
        assert!(ok.passed());
        let bad = validate_caption("The man says \"Of course not, said he\".", &record(), &lex);
        assert_eq!(bad.reasons, vec!["attribute-contradiction:gender"]);
    }

    #[test]
    fn multiword_phrases_match_across_hyphens() {
        let lex = Lexicon::default();
        let c = "A high-pitched voice says \"Of course not, said he\".";
        let r = validate_caption(c, &record(), &lex);
        assert_eq!(r.reasons, vec!["attribute-contradiction:pitch"]);
    }

    #[test]
    fn substring_words_do_not_match() {
        // "female" must not trigger the "male" entry
        let mut r = MetadataRecord::new("a", "hello");
        r.gender = Gender::Male;
        let lex = Lexicon::default();
        assert!(!validate_caption("A male says \"hello\" to a malevolent crowd.", &r, &lex)
            .reasons
            .iter()
            .any(|x| x.contains("gender")));
    }
}
