use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::CaptionError;

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant,)+
            #[default]
            Unspecified,
        }

        impl $name {
            pub const SPECIFIED: &'static [$name] = &[$($name::$variant),+];

            /// Surface form, or `None` when unspecified.
            pub fn label(self) -> Option<&'static str> {
                match self {
                    $($name::$variant => Some($text),)+
                    $name::Unspecified => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label().unwrap_or("unspecified"))
            }
        }
    };
}

attribute_enum!(Gender { Male => "male", Female => "female" });
attribute_enum!(Pitch { Low => "low", Normal => "normal", High => "high" });
attribute_enum!(Volume { Soft => "soft", Normal => "normal", Loud => "loud" });
attribute_enum!(Speed { Slow => "slow", Normal => "normal", Fast => "fast" });

fn default_corpus() -> String {
    "default".to_string()
}

/// Per-audio speech attributes and reference transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    pub audio_id: String,
    pub transcript: String,
    #[serde(default)]
    pub gender: Gender,
    #[serde(default)]
    pub pitch: Pitch,
    #[serde(default)]
    pub volume: Volume,
    #[serde(default)]
    pub speed: Speed,
    #[serde(default, with = "emotion_field")]
    pub emotion: Option<String>,
    #[serde(default)]
    pub duration_s: f64,
    #[serde(default = "default_corpus")]
    pub corpus: String,
}

impl MetadataRecord {
    pub fn new(audio_id: impl Into<String>, transcript: impl Into<String>) -> Self {
        Self {
            audio_id: audio_id.into(),
            transcript: transcript.into(),
            gender: Gender::Unspecified,
            pitch: Pitch::Unspecified,
            volume: Volume::Unspecified,
            speed: Speed::Unspecified,
            emotion: None,
            duration_s: 0.0,
            corpus: default_corpus(),
        }
    }

    pub fn validate(&self) -> Result<(), CaptionError> {
        if self.audio_id.is_empty() {
            return Err(CaptionError::InvalidRecord {
                audio_id: self.audio_id.clone(),
                msg: "empty audio_id".into(),
            });
        }
        if self.transcript.trim().is_empty() {
            return Err(CaptionError::InvalidRecord {
                audio_id: self.audio_id.clone(),
                msg: "empty transcript".into(),
            });
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(CaptionError::InvalidRecord {
                audio_id: self.audio_id.clone(),
                msg: format!("duration_s must be a non-negative number, got {}", self.duration_s),
            });
        }
        Ok(())
    }

    /// Categorical attributes as `(name, label)` pairs, specified ones only.
    pub fn categorical(&self) -> Vec<(&'static str, &'static str)> {
        [
            ("gender", self.gender.label()),
            ("pitch", self.pitch.label()),
            ("volume", self.volume.label()),
            ("speed", self.speed.label()),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Validates each record and rejects duplicate `audio_id`s within a corpus.
pub fn check_records(records: &[MetadataRecord]) -> Result<(), CaptionError> {
    let mut seen = BTreeSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert((r.corpus.as_str(), r.audio_id.as_str())) {
            return Err(CaptionError::InvalidRecord {
                audio_id: r.audio_id.clone(),
                msg: format!("duplicate audio_id in corpus `{}`", r.corpus),
            });
        }
    }
    Ok(())
}

mod emotion_field {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.as_deref().unwrap_or("unspecified"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
        let raw = Option::<String>::deserialize(d)?;
        Ok(raw.filter(|s| {
            let t = s.trim();
            !t.is_empty() && !t.eq_ignore_ascii_case("unspecified")
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_with_defaults() {
        let r: MetadataRecord =
            serde_json::from_str(r#"{"audio_id":"a1","transcript":"hi there","gender":"female"}"#)
                .unwrap();
        assert_eq!(r.gender, Gender::Female);
        assert_eq!(r.pitch, Pitch::Unspecified);
        assert_eq!(r.emotion, None);
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains(r#""emotion":"unspecified""#));
        assert_eq!(serde_json::from_str::<MetadataRecord>(&line).unwrap(), r);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<MetadataRecord>(
            r#"{"audio_id":"a","transcript":"t","colour":"red"}"#
        )
        .is_err());
    }

    #[test]
    fn empty_transcript_invalid() {
        assert!(MetadataRecord::new("a", "  ").validate().is_err());
    }

    #[test]
    fn duplicate_ids_in_same_corpus() {
        let a = MetadataRecord::new("x", "one");
        let mut b = MetadataRecord::new("x", "two");
        assert!(check_records(&[a.clone(), b.clone()]).is_err());
        b.corpus = "other".into();
        assert!(check_records(&[a, b]).is_ok());
    }
}
