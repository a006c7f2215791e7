//! Sentence templates with attribute placeholders.
//!
//! Placeholders are `[gender]`, `[text]`, `[emotion]`, `[pitch]`, `[volume]`
//! and `[speed]`. A clause wrapped in `{...}` is optional: it is dropped when
//! any placeholder inside it is unspecified. Placeholders outside braces are
//! mandatory. `[text]` expands to the transcript in double quotes.

use serde::{Deserialize, Serialize};

use super::metadata::MetadataRecord;
use super::CaptionError;

pub const PLACEHOLDERS: [&str; 6] = ["gender", "text", "emotion", "pitch", "volume", "speed"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub id: String,
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Piece(Piece),
    Optional(Vec<Piece>),
}

impl Template {
    pub fn new(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self, CaptionError> {
        let t = Self {
            id: id.into(),
            pattern: pattern.into(),
        };
        t.parse()?;
        Ok(t)
    }

    /// Whether `[text]` appears anywhere in the pattern.
    pub fn has_text(&self) -> bool {
        self.pattern.contains("[text]")
    }

    fn parse(&self) -> Result<Vec<Segment>, CaptionError> {
        let bad = |msg: String| CaptionError::BadTemplate {
            id: self.id.clone(),
            msg,
        };
        let mut segments = Vec::new();
        let mut group: Option<Vec<Piece>> = None;
        let mut literal = String::new();
        let mut chars = self.pattern.chars().peekable();

        fn flush(literal: &mut String, group: &mut Option<Vec<Piece>>, segments: &mut Vec<Segment>) {
            if literal.is_empty() {
                return;
            }
            let piece = Piece::Literal(std::mem::take(literal));
            match group {
                Some(g) => g.push(piece),
                None => segments.push(Segment::Piece(piece)),
            }
        }

        while let Some(c) = chars.next() {
            match c {
                '[' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some(']') => break,
                            Some(ch) => name.push(ch),
                            None => return Err(bad("unterminated placeholder".into())),
                        }
                    }
                    let slot = PLACEHOLDERS
                        .iter()
                        .copied()
                        .find(|p| *p == name)
                        .ok_or_else(|| bad(format!("unknown placeholder [{name}]")))?;
                    flush(&mut literal, &mut group, &mut segments);
                    match &mut group {
                        Some(g) => g.push(Piece::Slot(slot)),
                        None => segments.push(Segment::Piece(Piece::Slot(slot))),
                    }
                }
                '{' => {
                    if group.is_some() {
                        return Err(bad("nested optional clause".into()));
                    }
                    flush(&mut literal, &mut group, &mut segments);
                    group = Some(Vec::new());
                }
                '}' => {
                    flush(&mut literal, &mut group, &mut segments);
                    let g = group.take().ok_or_else(|| bad("unbalanced '}'".into()))?;
                    segments.push(Segment::Optional(g));
                }
                _ => literal.push(c),
            }
        }
        if group.is_some() {
            return Err(bad("unterminated optional clause".into()));
        }
        flush(&mut literal, &mut group, &mut segments);
        Ok(segments)
    }
}

fn slot_value(record: &MetadataRecord, slot: &str) -> Option<String> {
    match slot {
        "text" => Some(format!("\"{}\"", record.transcript)),
        "gender" => record.gender.label().map(str::to_string),
        "pitch" => record.pitch.label().map(str::to_string),
        "volume" => record.volume.label().map(str::to_string),
        "speed" => record.speed.label().map(str::to_string),
        "emotion" => record.emotion.clone(),
        _ => None,
    }
}

/// Fills a template from a metadata record.
pub fn expand_template(record: &MetadataRecord, template: &Template) -> Result<String, CaptionError> {
    let mut out = String::new();
    for seg in template.parse()? {
        match seg {
            Segment::Piece(Piece::Literal(s)) => out.push_str(&s),
            Segment::Piece(Piece::Slot(slot)) => {
                let v = slot_value(record, slot).ok_or_else(|| CaptionError::Unresolvable {
                    template: template.id.clone(),
                    placeholder: slot.to_string(),
                })?;
                out.push_str(&v);
            }
            Segment::Optional(pieces) => {
                let mut clause = String::new();
                let mut complete = true;
                for p in pieces {
                    match p {
                        Piece::Literal(s) => clause.push_str(&s),
                        Piece::Slot(slot) => match slot_value(record, slot) {
                            Some(v) => clause.push_str(&v),
                            None => {
                                complete = false;
                                break;
                            }
                        },
                    }
                }
                if complete {
                    out.push_str(&clause);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::metadata::Gender;

    fn cats() -> MetadataRecord {
        let mut r = MetadataRecord::new("a1", "I love cats");
        r.gender = Gender::Female;
        r.emotion = Some("joy".into());
        r
    }

    #[test]
    fn literal_template_from_caption_example() {
        let t = Template::new("x", "A [gender] speaker says [text] with [emotion] emotion.").unwrap();
        assert_eq!(
            expand_template(&cats(), &t).unwrap(),
            "A female speaker says \"I love cats\" with joy emotion."
        );
    }

    #[test]
    fn optional_emotion_clause_dropped() {
        let t = Template::new("x", "A [gender] speaker says [text]{ with [emotion] emotion}.").unwrap();
        let mut r = cats();
        r.emotion = None;
        assert_eq!(
            expand_template(&r, &t).unwrap(),
            "A female speaker says \"I love cats\"."
        );
    }

    #[test]
    fn mandatory_unspecified_names_placeholder() {
        let t = Template::new("x", "A [gender] speaker says [text] at [speed] speed.").unwrap();
        let err = expand_template(&cats(), &t).unwrap_err();
        assert!(err.to_string().contains("[speed]"), "{err}");
    }

    #[test]
    fn unknown_placeholder_rejected_at_construction() {
        assert!(Template::new("x", "A [colour] voice").is_err());
        assert!(Template::new("x", "{a {b}}").is_err());
        assert!(Template::new("x", "a }").is_err());
        assert!(Template::new("x", "[text").is_err());
    }
}
