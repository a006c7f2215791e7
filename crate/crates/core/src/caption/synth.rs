use rand::seq::IndexedRandom;
use rand::Rng;

use super::metadata::{Gender, MetadataRecord, Pitch, Speed, Volume};
use crate::rng::rng_for;

const WORDS: &[&str] = &[
    "the", "weather", "is", "lovely", "today", "please", "open", "window", "we", "should", "leave", "early",
    "tomorrow", "dinner", "was", "cold", "my", "sister", "plays", "piano", "train", "arrives", "at", "noon",
    "call", "me", "later", "garden", "needs", "water", "this", "book", "feels", "long", "coffee", "smells",
    "good", "meeting", "ran", "late",
];

const EMOTIONS: &[&str] = &["neutral", "happy", "sad", "angry"];

/// Random but seeded metadata for desk-scale runs: every categorical
/// attribute specified, 3 to 6 word transcripts, a quarter of them questions.
pub fn synthesize_metadata(n: usize, seed: u64, corpus: &str) -> Vec<MetadataRecord> {
    (0..n)
        .map(|i| {
            let id = format!("{corpus}-{i:04}");
            let mut rng = rng_for(seed, &format!("metadata/{id}"));
            let len = rng.random_range(3..=6);
            let mut words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).expect("non-empty")).collect();
            let question = rng.random_bool(0.25);
            let mut text = words.remove(0).to_string();
            for w in words {
                text.push(' ');
                text.push_str(w);
            }
            text.push(if question { '?' } else { '.' });
            let mut r = MetadataRecord::new(id, text);
            r.gender = *Gender::SPECIFIED.choose(&mut rng).expect("non-empty");
            r.pitch = *Pitch::SPECIFIED.choose(&mut rng).expect("non-empty");
            r.volume = *Volume::SPECIFIED.choose(&mut rng).expect("non-empty");
            r.speed = *Speed::SPECIFIED.choose(&mut rng).expect("non-empty");
            r.emotion = Some(EMOTIONS.choose(&mut rng).expect("non-empty").to_string());
            r.duration_s = (rng.random_range(15..=60) as f64) / 10.0;
            r.corpus = corpus.to_string();
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::check_records;

    #[test]
    fn valid_and_seeded() {
        let a = synthesize_metadata(12, 3, "toy");
        check_records(&a).unwrap();
        assert_eq!(a, synthesize_metadata(12, 3, "toy"));
        assert_ne!(a, synthesize_metadata(12, 4, "toy"));
        assert!(a.iter().all(|r| r.categorical().len() == 4 && r.emotion.is_some()));
    }
}
