//! Word-level vocabulary for the toy language models.
//!
//! Text is casefolded and split on whitespace, with each ASCII punctuation
//! character emitted as its own token. Canonical text (lowercase tokens
//! joined by single spaces) survives `decode(encode(text))` unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<sep>", "<eos>", "<unk>"];

/// Splits text into lowercase word and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from a corpus: specials first, then words by
    /// descending frequency (ties alphabetical), capped at `max_size` entries.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .map(|(w, _)| w)
                .take(max_size.saturating_sub(SPECIALS.len())),
        );
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(mut self) -> Self {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with single spaces, dropping special tokens other than `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id == UNK || id as usize >= SPECIALS.len())
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
