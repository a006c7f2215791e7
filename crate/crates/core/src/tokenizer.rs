//! Byte-level BPE tokenizer with a small shipped merge table.
//!
//! Ids `0..256` are raw bytes, then the special tokens, then one id per merge
//! in table order. Decoding is exact: `decode(encode(s)) == s` for any UTF-8
//! string.

use std::collections::HashMap;

use thiserror::Error;

const DEFAULT_MERGES: &str = include_str!("../data/merges.jsonl");

pub const EOS: u32 = 256;
pub const BOS: u32 = 257;
pub const PAD: u32 = 258;
const FIRST_MERGE_ID: u32 = 259;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("merge table line {line}: {msg}")]
    BadMerge { line: usize, msg: String },
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
    by_bytes: HashMap<Vec<u8>, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::from_merges(DEFAULT_MERGES).expect("shipped merge table is valid")
    }
}

impl Tokenizer {
    /// Parses a merge table: one JSON array `["left", "right"]` per line.
    /// Both sides must already be tokens (bytes or earlier merges).
    pub fn from_merges(table: &str) -> Result<Self, TokenizerError> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.push(b"<eos>".to_vec());
        pieces.push(b"<bos>".to_vec());
        pieces.push(b"<pad>".to_vec());
        let mut by_bytes: HashMap<Vec<u8>, u32> =
            (0..=255u8).map(|b| (vec![b], u32::from(b))).collect();
        let mut ranks = HashMap::new();
        for (line, raw) in table.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| TokenizerError::BadMerge {
                line: line + 1,
                msg,
            };
            let pair: [String; 2] =
                serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            let left = *by_bytes
                .get(pair[0].as_bytes())
                .ok_or_else(|| bad(format!("unknown left piece {:?}", pair[0])))?;
            let right = *by_bytes
                .get(pair[1].as_bytes())
                .ok_or_else(|| bad(format!("unknown right piece {:?}", pair[1])))?;
            let id = pieces.len() as u32;
            let mut merged = pair[0].as_bytes().to_vec();
            merged.extend_from_slice(pair[1].as_bytes());
            if by_bytes.contains_key(&merged) {
                return Err(bad(format!("duplicate piece {merged:?}")));
            }
            ranks.insert((left, right), id);
            by_bytes.insert(merged.clone(), id);
            pieces.push(merged);
        }
        Ok(Self {
            pieces,
            ranks,
            by_bytes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(u32::from).collect();
        // Merge ids increase with rank, so the lowest id is the highest-priority merge.
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&m| (m, i)))
                .min();
            let Some((merged, _)) = best else { break };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && self.ranks.get(&(ids[i], ids[i + 1])) == Some(&merged) {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Concatenates token bytes; special tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if is_special(id) {
                continue;
            }
            if let Some(p) = self.pieces.get(id as usize) {
                bytes.extend_from_slice(p);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn token_count(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.by_bytes.get(piece.as_bytes()).copied()
    }
}

pub fn is_special(id: u32) -> bool {
    (EOS..FIRST_MERGE_ID).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_table_loads() {
        let t = Tokenizer::default();
        assert!(t.vocab_size() > 300);
        let ids = t.encode("The speaker says \"hello\".");
        assert!(ids.len() < "The speaker says \"hello\".".len());
        assert_eq!(t.decode(&ids), "The speaker says \"hello\".");
    }

    #[test]
    fn empty_text() {
        let t = Tokenizer::default();
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
    }

    #[test]
    fn specials_are_dropped_on_decode() {
        let t = Tokenizer::default();
        let mut ids = t.encode("ok");
        ids.push(EOS);
        assert_eq!(t.decode(&ids), "ok");
    }

    #[test]
    fn unknown_piece_is_an_error() {
        let err = Tokenizer::from_merges("[\"ab\", \"c\"]").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    proptest! {
        #[test]
        fn round_trip(s in "\\PC{0,60}") {
            let t = Tokenizer::default();
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
