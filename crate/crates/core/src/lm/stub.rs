//! Deterministic stand-ins for the external models: a paraphrasing oracle
//! and a target LLM with a hidden word preference.
//!
//! Both share a small instruction lexicon. Words outside it are *content*
//! words: the part of a prompt that carries the actual task input. Rewrites
//! never touch content words; the target's output is built from them.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GenerationParams;
use crate::rng;
use crate::tokenizer::split_words;

/// Interchangeable instruction words.
pub const SYNONYM_GROUPS: &[&[&str]] = &[
    &["write", "compose", "produce"],
    &["short", "brief", "concise"],
    &["summary", "overview", "synopsis"],
    &["text", "passage", "article"],
    &["give", "provide", "offer"],
    &["question", "query", "inquiry"],
    &["answer", "address", "resolve"],
    &["classify", "categorize", "sort"],
    &["topic", "subject", "theme"],
    &["describe", "explain", "outline"],
    &["about", "regarding", "concerning"],
    &["headline", "title", "caption"],
];

/// Default hidden preference of the stub target.
pub const DEFAULT_PREFERRED: &[&str] = &[
    "produce", "concise", "synopsis", "passage", "provide", "query", "address", "categorize", "theme",
    "outline", "regarding", "title", "please",
];

pub const FILLERS: &[&str] = &["please", "kindly", "now"];

const PREPOSITIONS: &[&str] = &["about", "regarding", "concerning"];

const PARTICIPLES: &[(&str, &str)] = &[
    ("write", "written"),
    ("compose", "composed"),
    ("produce", "produced"),
    ("give", "given"),
    ("provide", "provided"),
    ("offer", "offered"),
    ("describe", "described"),
    ("explain", "explained"),
    ("outline", "outlined"),
    ("answer", "answered"),
    ("address", "addressed"),
    ("resolve", "resolved"),
    ("classify", "classified"),
    ("categorize", "categorized"),
    ("sort", "sorted"),
];

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "of", "this", "that", "these", "in", "for", "to", "on", "with", "and", "should",
    "be", "is", "it", "its", "into", "task", "generative", "answering", "classification",
];

/// Instruction template sent to a real oracle endpoint.
pub fn rewrite_instruction(original: &str) -> String {
    format!("Please rewrite the given text '{original}' while keeping the semantic meaning unchanged.")
}

fn parse_rewrite_instruction(prompt: &str) -> Option<&str> {
    let rest = prompt.strip_prefix("Please rewrite the given text '")?;
    rest.strip_suffix("' while keeping the semantic meaning unchanged.")
}

pub fn is_instruction_word(word: &str) -> bool {
    word.chars().all(|c| c.is_ascii_punctuation())
        || FUNCTION_WORDS.contains(&word)
        || FILLERS.contains(&word)
        || SYNONYM_GROUPS.iter().any(|g| g.contains(&word))
        || PARTICIPLES.iter().any(|(_, p)| *p == word)
}

/// Every word of the instruction lexicon, sorted and deduplicated.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = SYNONYM_GROUPS
        .iter()
        .flat_map(|g| g.iter().copied())
        .chain(FILLERS.iter().copied())
        .chain(FUNCTION_WORDS.iter().copied())
        .chain(PARTICIPLES.iter().flat_map(|(v, p)| [*v, *p]))
        .chain(["should", ","])
        .collect();
    words.sort_unstable();
    words.dedup();
    words
}

/// Words of `text` outside the instruction lexicon, in order.
pub fn content_words(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| !is_instruction_word(w))
        .collect()
}

fn synonym_group(word: &str) -> Option<&'static [&'static str]> {
    SYNONYM_GROUPS.iter().copied().find(|g| g.contains(&word))
}

/// Paraphrasing oracle built from surface rewrites: synonym swap, clause
/// reorder, voice flip and filler insertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubParaphraser {
    pub seed: u64,
    /// Rewrite operations applied per candidate are drawn from `1..=max_ops`.
    pub max_ops: usize,
}

impl Default for StubParaphraser {
    fn default() -> Self {
        Self { seed: 7, max_ops: 2 }
    }
}

impl StubParaphraser {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    /// `n` rewrites of `original`; rewrite `i` depends only on `(seed, original, i)`.
    pub fn paraphrase(&self, original: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| self.rewrite(original, i as u64)).collect()
    }

    pub fn rewrite(&self, original: &str, index: u64) -> String {
        let mut rng = rng::rng_for(self.seed, &["paraphrase", original, &index.to_string()]);
        let source = split_words(original);
        let mut words = source.clone();
        let ops = rng.random_range(1..=self.max_ops.max(1));
        for _ in 0..ops {
            let op = rng.random_range(0..4);
            let changed = match op {
                0 => swap_synonym(&mut words, &mut rng),
                1 => reorder_clause(&mut words),
                2 => flip_voice(&mut words),
                _ => toggle_filler(&mut words, &mut rng),
            };
            if !changed {
                swap_synonym(&mut words, &mut rng);
            }
        }
        if words == source && !swap_synonym(&mut words, &mut rng) {
            toggle_filler(&mut words, &mut rng);
        }
        words.join(" ")
    }

    /// Answers a rewrite instruction with one rewrite; any other prompt gets
    /// the full content of the prompt, standing in for a stronger model's output.
    pub fn generate_text(&self, prompt: &str, params: &GenerationParams) -> String {
        match parse_rewrite_instruction(prompt) {
            Some(original) => self.rewrite(original, params.seed),
            None => content_words(prompt).join(" "),
        }
    }
}

fn swap_synonym(words: &mut [String], rng: &mut impl Rng) -> bool {
    let slots: Vec<usize> = (0..words.len())
        .filter(|&i| synonym_group(&words[i]).is_some())
        .collect();
    let Some(&slot) = slots.choose(rng) else {
        return false;
    };
    let group = synonym_group(&words[slot]).expect("slot has a group");
    let others: Vec<&str> = group.iter().copied().filter(|w| *w != words[slot]).collect();
    words[slot] = others.choose(rng).expect("groups have 2+ members").to_string();
    true
}

/// `A prep B` becomes `prep B , A`, and back.
fn reorder_clause(words: &mut Vec<String>) -> bool {
    if words.first().is_some_and(|w| PREPOSITIONS.contains(&w.as_str())) {
        if let Some(comma) = words.iter().position(|w| w == ",") {
            if comma + 1 < words.len() {
                let mut out: Vec<String> = words[comma + 1..].to_vec();
                out.extend_from_slice(&words[..comma]);
                *words = out;
                return true;
            }
        }
        return false;
    }
    let Some(p) = words.iter().position(|w| PREPOSITIONS.contains(&w.as_str())) else {
        return false;
    };
    if p == 0 || words[..p].contains(&",".to_string()) {
        return false;
    }
    let mut out: Vec<String> = words[p..].to_vec();
    out.push(",".into());
    out.extend_from_slice(&words[..p]);
    *words = out;
    true
}

/// `verb X` becomes `X should be verbed`, and back.
fn flip_voice(words: &mut Vec<String>) -> bool {
    let n = words.len();
    if n >= 3 && words[n - 3] == "should" && words[n - 2] == "be" {
        if let Some((verb, _)) = PARTICIPLES.iter().find(|(_, p)| *p == words[n - 1]) {
            let mut out = vec![verb.to_string()];
            out.extend_from_slice(&words[..n - 3]);
            *words = out;
            return true;
        }
        return false;
    }
    let start = usize::from(words.first().is_some_and(|w| FILLERS.contains(&w.as_str())));
    let Some(first) = words.get(start) else {
        return false;
    };
    let Some((_, participle)) = PARTICIPLES.iter().find(|(v, _)| v == first) else {
        return false;
    };
    if start + 1 >= n {
        return false;
    }
    let mut out: Vec<String> = words[..start].to_vec();
    out.extend_from_slice(&words[start + 1..]);
    out.push("should".into());
    out.push("be".into());
    out.push(participle.to_string());
    *words = out;
    true
}

fn toggle_filler(words: &mut Vec<String>, rng: &mut impl Rng) -> bool {
    if words.first().is_some_and(|w| FILLERS.contains(&w.as_str())) {
        words.remove(0);
    } else {
        let filler = FILLERS.choose(rng).expect("fillers non-empty");
        words.insert(0, filler.to_string());
    }
    true
}

/// A target LLM whose answer quality grows with the number of distinct
/// preferred words in the prompt. The answer is the prompt's content words,
/// truncated to a prefix of `round(|content| * f)` words with
/// `f = min(1, (1 + k) / (1 + saturation))` for `k` preferred words present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTarget {
    pub preferred: BTreeSet<String>,
    pub saturation: usize,
}

impl Default for PreferenceTarget {
    fn default() -> Self {
        Self {
            preferred: DEFAULT_PREFERRED.iter().map(|s| s.to_string()).collect(),
            saturation: 4,
        }
    }
}

impl PreferenceTarget {
    pub fn preferred_count(&self, prompt: &str) -> usize {
        split_words(prompt)
            .into_iter()
            .filter(|w| self.preferred.contains(w))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn generate_text(&self, prompt: &str) -> String {
        let content = content_words(prompt);
        let k = self.preferred_count(prompt);
        let frac = ((1 + k) as f64 / (1 + self.saturation) as f64).min(1.0);
        let keep = (content.len() as f64 * frac).round() as usize;
        content[..keep.min(content.len())].join(" ")
    }
}
