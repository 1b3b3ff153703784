//! Task-scoring metrics: ROUGE-L, token F1, exact-match accuracy, and the
//! normalized edit distance used to measure how far a rewrite moved.
//!
//! All scores lie in `[0, 1]`. Every function is pure.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A metric value in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    pub const ZERO: Score = Score(0.0);
    pub const ONE: Score = Score(1.0);

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            Score(0.0)
        } else {
            Score(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<Score> for f64 {
    fn from(s: Score) -> f64 {
        s.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "qa", alias = "question_answering")]
    QuestionAnswering,
    #[serde(rename = "classification")]
    Classification,
    #[serde(rename = "generation")]
    Generation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::QuestionAnswering,
        TaskKind::Classification,
        TaskKind::Generation,
    ];

    /// Wire name used in JSONL records and CSV reports.
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::QuestionAnswering => "qa",
            TaskKind::Classification => "classification",
            TaskKind::Generation => "generation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "qa" | "question_answering" | "question-answering" => Some(TaskKind::QuestionAnswering),
            "classification" | "class" => Some(TaskKind::Classification),
            "generation" | "gen" => Some(TaskKind::Generation),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Punctuation-stripped, casefolded, whitespace-split text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub source_text: String,
}

impl TokenizedText {
    pub fn new(text: &str) -> Self {
        let cleaned: String = text
            .chars()
            .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
            .collect();
        let tokens = cleaned
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        Self {
            tokens,
            source_text: text.to_string(),
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let source_text = tokens.join(" ");
        Self {
            tokens,
            source_text,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How the raw Levenshtein distance is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditDivisor {
    /// `max(|a|, |b|)`: always within `[0, 1]`.
    #[default]
    MaxLength,
    /// `(|a| + |b|) / 2`: can exceed 1 when one side is much shorter.
    MeanLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// ROUGE-L recall weight; 1.0 is the plain harmonic mean.
    pub rouge_beta: f64,
    pub edit_divisor: EditDivisor,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            rouge_beta: 1.0,
            edit_divisor: EditDivisor::MaxLength,
        }
    }
}

pub fn lcs_length(a: &TokenizedText, b: &TokenizedText) -> usize {
    let (a, b) = (&a.tokens, &b.tokens);
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_measure(precision: f64, recall: f64, beta: f64) -> f64 {
    if precision == 0.0 || recall == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * precision * recall / (recall + b2 * precision)
}

pub fn rouge_l(candidate: &TokenizedText, reference: &TokenizedText) -> Score {
    rouge_l_with_beta(candidate, reference, 1.0)
}

pub fn rouge_l_with_beta(candidate: &TokenizedText, reference: &TokenizedText, beta: f64) -> Score {
    if candidate.is_empty() || reference.is_empty() {
        return Score::ZERO;
    }
    let l = lcs_length(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Score::new(f_measure(p, r, beta))
}

pub fn token_f1(prediction: &TokenizedText, gold: &TokenizedText) -> Score {
    if prediction.is_empty() || gold.is_empty() {
        return Score::ZERO;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gold.tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &prediction.tokens {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let p = overlap as f64 / prediction.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    Score::new(f_measure(p, r, 1.0))
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn exact_match_accuracy(prediction: &str, gold: &str) -> Score {
    if normalize_label(prediction) == normalize_label(gold) {
        Score::ONE
    } else {
        Score::ZERO
    }
}

/// Mean exact-match accuracy over `(prediction, gold)` pairs; 0 for an empty batch.
pub fn exact_match_accuracy_batch<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Score {
    let (hits, n) = pairs
        .into_iter()
        .fold((0.0, 0usize), |(h, n), (p, g)| (h + exact_match_accuracy(p, g).value(), n + 1));
    if n == 0 {
        Score::ZERO
    } else {
        Score::new(hits / n as f64)
    }
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn normalized_edit_distance(a: &str, b: &str) -> Score {
    normalized_edit_distance_with(a, b, EditDivisor::MaxLength)
}

/// Under [`EditDivisor::MeanLength`] the ratio is clamped into `[0, 1]`.
pub fn normalized_edit_distance_with(a: &str, b: &str, divisor: EditDivisor) -> Score {
    let (la, lb) = (a.chars().count(), b.chars().count());
    if la == 0 && lb == 0 {
        return Score::ZERO;
    }
    let denom = match divisor {
        EditDivisor::MaxLength => la.max(lb) as f64,
        EditDivisor::MeanLength => (la + lb) as f64 / 2.0,
    };
    Score::new(levenshtein(a, b) as f64 / denom)
}

/// Scores a model output against its reference with the metric bound to `task`.
pub fn score_for_task(task: TaskKind, prediction: &str, reference: &str) -> Score {
    match task {
        TaskKind::QuestionAnswering => token_f1(&TokenizedText::new(prediction), &TokenizedText::new(reference)),
        TaskKind::Classification => exact_match_accuracy(prediction, reference),
        TaskKind::Generation => rouge_l(&TokenizedText::new(prediction), &TokenizedText::new(reference)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tt(s: &str) -> TokenizedText {
        TokenizedText::new(s)
    }

    #[test]
    fn tokenization() {
        assert!(tt("").is_empty());
        assert_eq!(tt("Hello, World!").tokens, vec!["hello", "world"]);
        assert_eq!(tt("a  b"), tt("a  b"));
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length(&tt("the cat sat"), &tt("the cat sat")), 3);
        assert_eq!(lcs_length(&tt(""), &tt("the cat")), 0);
        assert_eq!(lcs_length(&tt("a b c d"), &tt("b x c")), 2);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&tt("the cat sat"), &tt("the cat sat")).value(), 1.0);
        assert_eq!(rouge_l(&tt(""), &tt("the cat")).value(), 0.0);
        let s = rouge_l(&tt("the cat sat"), &tt("the cat sat down")).value();
        assert!((s - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_beta_weights_recall() {
        // P = 1, R = 0.75
        let s = rouge_l_with_beta(&tt("the cat sat"), &tt("the cat sat down"), 2.0).value();
        assert!((s - 5.0 * 0.75 / (0.75 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1(&tt("x y z"), &tt("x y z")).value(), 1.0);
        assert_eq!(token_f1(&tt("x y"), &tt("p q")).value(), 0.0);
        assert!((token_f1(&tt("a b c"), &tt("b c d")).value() - 2.0 / 3.0).abs() < 1e-12);
        // multiplicity: prediction repeats a gold token once present
        assert!((token_f1(&tt("a a"), &tt("a b")).value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(exact_match_accuracy("Positive", "positive").value(), 1.0);
        assert_eq!(exact_match_accuracy("sports", "business").value(), 0.0);
        let batch = exact_match_accuracy_batch([("a", "a"), ("b", " B "), ("c", "d")]);
        assert!((batch.value() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(exact_match_accuracy_batch(std::iter::empty()).value(), 0.0);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(normalized_edit_distance("abc", "abc").value(), 0.0);
        assert_eq!(normalized_edit_distance("abc", "").value(), 1.0);
        assert_eq!(normalized_edit_distance("abc", "abd").value(), 1.0 / 3.0);
        assert_eq!(normalized_edit_distance("", "").value(), 0.0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        // mean-length divisor would give 2.0 here without clamping
        assert_eq!(normalized_edit_distance_with("abc", "", EditDivisor::MeanLength).value(), 1.0);
    }

    #[test]
    fn task_dispatch() {
        assert_eq!(score_for_task(TaskKind::Generation, "one two", "one two").value(), 1.0);
        assert_eq!(score_for_task(TaskKind::Classification, "sports", "world").value(), 0.0);
        let s = score_for_task(TaskKind::QuestionAnswering, "a b c", "b c d").value();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn task_kind_wire_names() {
        for t in TaskKind::ALL {
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
            assert_eq!(TaskKind::parse(t.as_str()), Some(t));
        }
        assert_eq!(TaskKind::parse("poetry"), None);
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..10)
    }

    proptest! {
        #[test]
        fn lcs_symmetric_and_bounded(a in words(), b in words()) {
            let (a, b) = (TokenizedText::from_tokens(a), TokenizedText::from_tokens(b));
            let l = lcs_length(&a, &b);
            prop_assert_eq!(l, lcs_length(&b, &a));
            prop_assert!(l <= a.len().min(b.len()));
        }

        #[test]
        fn metrics_in_unit_interval(a in words(), b in words()) {
            let (a, b) = (TokenizedText::from_tokens(a), TokenizedText::from_tokens(b));
            for s in [rouge_l(&a, &b), token_f1(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&s.value()));
            }
            if !a.is_empty() {
                prop_assert_eq!(rouge_l(&a, &a).value(), 1.0);
                prop_assert_eq!(token_f1(&a, &a).value(), 1.0);
            }
        }

        #[test]
        fn edit_distance_contract(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            let d = normalized_edit_distance(&a, &b).value();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d == 0.0, a == b);
            // raw distances obey the triangle inequality
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
