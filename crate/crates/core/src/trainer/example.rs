use crate::tokenizer::{Tokenizer, BOS, EOS};

use super::{Result, TrainError};

/// Separator appended to the transcript and to the prompt in the token layout.
pub const SEGMENT_SEP: &str = "\n";

/// One next-token-prediction example over `[prefix ∥ tokens]`.
///
/// `tokens = BOS ∥ transcript ∥ prompt ∥ target` with the final target token
/// dropped (it is only ever predicted). `targets[i]` is the token expected
/// after row `i` and `loss_mask[i]` is set exactly on rows that predict a
/// target token.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub prefix_len: usize,
    pub transcript_tokens: Vec<u32>,
    pub prompt_tokens: Vec<u32>,
    /// Caption tokens plus a closing end-of-sequence token; empty for an
    /// empty caption.
    pub target_tokens: Vec<u32>,
    pub tokens: Vec<u32>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn seq_len(&self) -> usize {
        self.prefix_len + self.tokens.len()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Token ids fed after the prefix when generating: `BOS ∥ transcript ∥ prompt`.
    pub fn conditioning(&self) -> &[u32] {
        &self.tokens[..1 + self.transcript_tokens.len() + self.prompt_tokens.len()]
    }
}

/// Tokens of `BOS ∥ transcript ∥ sep ∥ prompt ∥ sep`, the conditioning part
/// shared by training and generation.
pub fn conditioning_tokens(tok: &Tokenizer, transcript: &str, prompt: &str) -> (Vec<u32>, Vec<u32>) {
    (
        tok.encode(&format!("{transcript}{SEGMENT_SEP}")),
        tok.encode(&format!("{prompt}{SEGMENT_SEP}")),
    )
}

/// `BOS ∥ transcript ∥ sep ∥ instruction ∥ sep`: what generation is
/// conditioned on after the audio prefix.
pub fn instruction_prompt(tok: &Tokenizer, transcript: &str, instruction: &str) -> Vec<u32> {
    let (t, p) = conditioning_tokens(tok, transcript, instruction);
    let mut out = Vec::with_capacity(1 + t.len() + p.len());
    out.push(BOS);
    out.extend(t);
    out.extend(p);
    out
}

pub fn assemble_input(
    tok: &Tokenizer,
    prefix_len: usize,
    transcript: &str,
    prompt: &str,
    target: &str,
    max_seq_len: usize,
) -> Result<TrainingExample> {
    let (transcript_tokens, prompt_tokens) = conditioning_tokens(tok, transcript, prompt);
    let mut target_tokens = tok.encode(target);
    if !target_tokens.is_empty() {
        target_tokens.push(EOS);
    }
    let mut full = Vec::with_capacity(1 + transcript_tokens.len() + prompt_tokens.len() + target_tokens.len());
    full.push(BOS);
    full.extend_from_slice(&transcript_tokens);
    full.extend_from_slice(&prompt_tokens);
    let first_target = full.len();
    full.extend_from_slice(&target_tokens);
    let tokens: Vec<u32> = if target_tokens.is_empty() {
        full.clone()
    } else {
        full[..full.len() - 1].to_vec()
    };
    let len = prefix_len + tokens.len();
    if len > max_seq_len {
        return Err(TrainError::TooLong { len, max: max_seq_len });
    }
    let mut targets = vec![0usize; len];
    let mut loss_mask = vec![false; len];
    for k in 0..tokens.len() {
        // row prefix_len + k predicts full[k + 1]
        if let Some(&next) = full.get(k + 1) {
            targets[prefix_len + k] = next as usize;
            loss_mask[prefix_len + k] = k + 1 >= first_target;
        }
    }
    Ok(TrainingExample {
        prefix_len,
        transcript_tokens,
        prompt_tokens,
        target_tokens,
        tokens,
        targets,
        loss_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_target_masks_nothing() {
        let tok = Tokenizer::default();
        let ex = assemble_input(&tok, 3, "hello", "Describe the speech.", "", 200).unwrap();
        assert_eq!(ex.masked_count(), 0);
        assert!(ex.target_tokens.is_empty());
        assert_eq!(ex.seq_len(), ex.loss_mask.len());
    }

    #[test]
    fn mask_count_equals_target_len() {
        let tok = Tokenizer::default();
        let ex = assemble_input(&tok, 4, "hi there", "Describe the speech.", "A calm voice says \"hi there\".", 200)
            .unwrap();
        assert_eq!(ex.masked_count(), ex.target_tokens.len());
        // the last masked row predicts EOS
        let last = ex.loss_mask.iter().rposition(|&m| m).unwrap();
        assert_eq!(last, ex.seq_len() - 1);
        assert_eq!(ex.targets[last], EOS as usize);
        // prefix rows never count
        assert!(ex.loss_mask[..4].iter().all(|&m| !m));
    }

    #[test]
    fn too_long() {
        let tok = Tokenizer::default();
        let err = assemble_input(&tok, 60, "a b c d e f g", "prompt", "target text", 64).unwrap_err();
        assert!(matches!(err, TrainError::TooLong { max: 64, .. }));
    }
}
