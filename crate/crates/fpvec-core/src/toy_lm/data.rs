//! Supervised byte pairs, tokenization, and corpus files.
//!
//! The tokenizer is byte-level: token ids 0..=255 are raw byte values and
//! the top three ids of the vocabulary are BOS, EOS, PAD. A training
//! sequence is `[BOS] prompt completion [EOS]`; the loss is taken only at
//! positions whose prediction target is a completion byte or the closing
//! EOS.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

use super::ToyLMConfig;

/// One prompt/completion example. Both sides are raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedPair {
    pub prompt: Vec<u8>,
    pub completion: Vec<u8>,
}

impl SupervisedPair {
    pub fn new(prompt: impl Into<Vec<u8>>, completion: impl Into<Vec<u8>>) -> Self {
        SupervisedPair { prompt: prompt.into(), completion: completion.into() }
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt: String,
    completion: String,
}

/// Read a JSON-lines corpus of `{"prompt": ..., "completion": ...}` records.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<SupervisedPair>> {
    let records: Vec<PairRecord> = jsonl::read_records(path.as_ref())?;
    records
        .into_iter()
        .map(|r| {
            Ok(SupervisedPair {
                prompt: jsonl::text_to_bytes(&r.prompt)?,
                completion: jsonl::text_to_bytes(&r.completion)?,
            })
        })
        .collect()
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[SupervisedPair]) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            prompt: jsonl::bytes_to_text(&p.prompt),
            completion: jsonl::bytes_to_text(&p.completion),
        })
        .collect();
    jsonl::write_records(path.as_ref(), &records)
}

/// Concatenated bytes of every prompt and completion, newline separated.
/// Used as the reference corpus for trigger rarity checks.
pub fn corpus_bytes(pairs: &[SupervisedPair]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in pairs {
        out.extend_from_slice(&p.prompt);
        out.extend_from_slice(&p.completion);
        out.push(b'\n');
    }
    out
}

/// A tokenized pair ready for the model.
#[derive(Debug, Clone)]
pub(crate) struct EncodedPair {
    /// `[BOS] prompt completion [EOS]` as token ids.
    pub tokens: Vec<usize>,
    /// First supervised input position: inputs `tokens[..len-1]`, targets
    /// `tokens[1..]`, and positions `first_supervised..` carry loss.
    pub first_supervised: usize,
}

impl EncodedPair {
    pub fn input_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn supervised_positions(&self) -> usize {
        self.input_len() - self.first_supervised
    }
}

fn encode_bytes(cfg: &ToyLMConfig, bytes: &[u8], out: &mut Vec<usize>) -> Result<()> {
    for &b in bytes {
        if (b as usize) > cfg.max_byte() {
            return Err(Error::Argument(format!(
                "byte {b} exceeds the encodable range 0..={} for vocab_size {}",
                cfg.max_byte(),
                cfg.vocab_size
            )));
        }
        out.push(b as usize);
    }
    Ok(())
}

pub(crate) fn encode_pair(cfg: &ToyLMConfig, pair: &SupervisedPair) -> Result<EncodedPair> {
    if pair.completion.is_empty() {
        return Err(Error::Argument("completion must be non-empty".into()));
    }
    let total = pair.prompt.len() + pair.completion.len() + 2;
    if total > cfg.context_len {
        return Err(Error::Argument(format!(
            "sequence of {total} tokens (with BOS/EOS) exceeds context_len {}",
            cfg.context_len
        )));
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.push(cfg.bos());
    encode_bytes(cfg, &pair.prompt, &mut tokens)?;
    encode_bytes(cfg, &pair.completion, &mut tokens)?;
    tokens.push(cfg.eos());
    Ok(EncodedPair { tokens, first_supervised: pair.prompt.len() })
}

/// Tokenize a bare prompt for generation: `[BOS] prompt`.
pub(crate) fn encode_prompt(cfg: &ToyLMConfig, prompt: &[u8]) -> Result<Vec<usize>> {
    let total = prompt.len() + 1;
    if total > cfg.context_len {
        return Err(Error::Argument(format!(
            "prompt of {total} tokens (with BOS) exceeds context_len {}",
            cfg.context_len
        )));
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.push(cfg.bos());
    encode_bytes(cfg, prompt, &mut tokens)?;
    Ok(tokens)
}
