use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dimension, EvalError, Result, Split};
use crate::caption::{Gender, MetadataRecord, Pitch, Speed, Volume};
use crate::rng::rng_for;
use crate::trainer::InstructionPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSample {
    pub instruction: String,
    pub audio_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl TaskSample {
    /// Answers that count as following the instruction: the listed options,
    /// or yes/no for binary questions.
    pub fn allowed(&self) -> Vec<String> {
        self.options
            .clone()
            .unwrap_or_else(|| vec!["yes".to_string(), "no".to_string()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub instance_id: String,
    pub dimension: Dimension,
    pub split: Split,
    pub samples: Vec<TaskSample>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        if self.instance_id.trim().is_empty() {
            return Err(EvalError::Invalid("empty instance id".into()));
        }
        if self.samples.is_empty() {
            return Err(EvalError::Invalid(format!("instance `{}` has no samples", self.instance_id)));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label.trim().is_empty() {
                return Err(EvalError::Invalid(format!(
                    "instance `{}` sample {i} has an empty label",
                    self.instance_id
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_tasks(tasks: &[TaskInstance]) -> Result<()> {
    let mut ids = std::collections::BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !ids.insert(t.instance_id.as_str()) {
            return Err(EvalError::Invalid(format!("duplicate instance `{}`", t.instance_id)));
        }
    }
    Ok(())
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

type Question = fn(&MetadataRecord, &mut rand_chacha::ChaCha8Rng, &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)>;

fn q_gender(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    let label = match r.gender {
        Gender::Male => "male",
        Gender::Female => "female",
        Gender::Unspecified => return None,
    };
    Some((
        "What is the gender of the speaker? Answer male or female.".into(),
        label.into(),
        Some(vec!["male".into(), "female".into()]),
    ))
}

fn q_is_female(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    (r.gender != Gender::Unspecified).then(|| {
        ("Is the speaker a woman? Answer yes or no.".into(), yes_no(r.gender == Gender::Female), None)
    })
}

fn q_fast(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    (r.speed != Speed::Unspecified)
        .then(|| ("Is the speaker talking fast? Answer yes or no.".into(), yes_no(r.speed == Speed::Fast), None))
}

fn q_high_pitch(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    (r.pitch != Pitch::Unspecified)
        .then(|| ("Is the speaker's pitch high? Answer yes or no.".into(), yes_no(r.pitch == Pitch::High), None))
}

fn q_quiet(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    (r.volume != Volume::Unspecified)
        .then(|| ("Is the recording quiet? Answer yes or no.".into(), yes_no(r.volume == Volume::Soft), None))
}

fn q_loud(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    (r.volume != Volume::Unspecified)
        .then(|| ("Is the recording loud? Answer yes or no.".into(), yes_no(r.volume == Volume::Loud), None))
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| w.len() >= 3)
        .map(str::to_lowercase)
        .collect()
}

fn q_word(r: &MetadataRecord, rng: &mut rand_chacha::ChaCha8Rng, all: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    let own = words(&r.transcript);
    let foreign: Vec<String> = all
        .iter()
        .flat_map(|o| words(&o.transcript))
        .filter(|w| !own.contains(w))
        .collect();
    let present = rng.random_bool(0.5);
    let word = if present || foreign.is_empty() {
        own.get(rng.random_range(0..own.len().max(1)))?.clone()
    } else {
        foreign[rng.random_range(0..foreign.len())].clone()
    };
    let label = own.contains(&word);
    Some((
        format!("Does the speech mention the word \"{word}\"? Answer yes or no."),
        yes_no(label),
        None,
    ))
}

fn q_question(r: &MetadataRecord, _: &mut rand_chacha::ChaCha8Rng, _: &[MetadataRecord]) -> Option<(String, String, Option<Vec<String>>)> {
    Some((
        "Is the speaker asking a question? Answer yes or no.".into(),
        yes_no(r.transcript.trim_end().ends_with('?')),
        None,
    ))
}

const CATALOGUE: &[(&str, Dimension, Split, Question)] = &[
    ("con-word", Dimension::Con, Split::Seen, q_word),
    ("spk-gender", Dimension::Spk, Split::Seen, q_gender),
    ("par-fast", Dimension::Par, Split::Seen, q_fast),
    ("deg-quiet", Dimension::Deg, Split::Seen, q_quiet),
    ("sem-question", Dimension::Sem, Split::Unseen, q_question),
    ("spk-female", Dimension::Spk, Split::Unseen, q_is_female),
    ("par-high-pitch", Dimension::Par, Split::Unseen, q_high_pitch),
    ("deg-loud", Dimension::Deg, Split::Unseen, q_loud),
];

/// Builds attribute questions over the metadata. Each instance samples up to
/// `samples_per_instance` audios (seeded); instances with no answerable audio
/// are dropped.
pub fn synthesize_tasks(metadata: &[MetadataRecord], samples_per_instance: usize, seed: u64) -> Vec<TaskInstance> {
    let mut out = Vec::new();
    for &(id, dimension, split, question) in CATALOGUE {
        let mut order: Vec<&MetadataRecord> = metadata.iter().collect();
        order.sort_by(|a, b| a.audio_id.cmp(&b.audio_id));
        order.shuffle(&mut rng_for(seed, &format!("tasks/{id}/order")));
        let mut samples = Vec::new();
        for r in order {
            if samples.len() == samples_per_instance {
                break;
            }
            let mut rng = rng_for(seed, &format!("tasks/{id}/{}", r.audio_id));
            if let Some((instruction, label, options)) = question(r, &mut rng, metadata) {
                samples.push(TaskSample {
                    instruction,
                    audio_id: r.audio_id.clone(),
                    label,
                    options,
                });
            }
        }
        if samples.is_empty() {
            log::info!("synthesize_tasks: no answerable audio for `{id}`, skipped");
            continue;
        }
        out.push(TaskInstance {
            instance_id: id.to_string(),
            dimension,
            split,
            samples,
        });
    }
    out
}

/// Instruction/response pairs for instruction tuning on one split.
pub fn instruction_pairs(tasks: &[TaskInstance], split: Split) -> Vec<InstructionPair> {
    tasks
        .iter()
        .filter(|t| t.split == split)
        .flat_map(|t| {
            t.samples.iter().enumerate().map(move |(i, s)| InstructionPair {
                id: format!("{}/{i}", t.instance_id),
                audio_id: s.audio_id.clone(),
                instruction: s.instruction.clone(),
                response: s.label.clone(),
            })
        })
        .collect()
}
