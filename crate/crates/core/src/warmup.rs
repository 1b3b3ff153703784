//! Warm-up dataset construction: paraphrase each original prompt, score
//! every candidate's downstream output on the target model, keep the best
//! candidate as the optimized prompt and the full ordering as a ranking
//! sequence for reward-model training.

use std::cmp::Ordering;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{MapoError, Result};
use crate::lm::{paraphrase, stub, Backend, GenerationParams, PolicyHandle};
use crate::metrics::{score_for_task, Score, TaskKind};

/// One input prompt with its task and, optionally, a ground-truth output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub task: TaskKind,
    pub dataset: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub prompt_text: String,
    pub generated_output: String,
    pub score: Score,
    /// Generation failed; the score was forced to 0.
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub original: String,
    pub optimized: String,
    pub task: TaskKind,
    pub dataset_name: String,
    pub reference_output: String,
    pub score_original: Score,
    pub score_optimized: Score,
}

impl PromptPair {
    pub fn is_identity(&self) -> bool {
        self.original == self.optimized
    }
}

/// Candidates and the original, ascending by score.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingSequence {
    pub entries: Vec<ScoredCandidate>,
    pub original_index: usize,
    /// Number of candidates, excluding the original.
    pub k: usize,
}

impl RankingSequence {
    pub fn original(&self) -> &ScoredCandidate {
        &self.entries[self.original_index]
    }

    /// Keeps the lowest and highest `band` candidates (and the original).
    pub fn truncate_band(&self, band: usize) -> RankingSequence {
        let n = self.entries.len();
        if 2 * band >= n {
            return self.clone();
        }
        let keep = |i: usize| i < band || i >= n - band || i == self.original_index;
        let mut entries = Vec::new();
        let mut original_index = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if keep(i) {
                if i == self.original_index {
                    original_index = entries.len();
                }
                entries.push(e.clone());
            }
        }
        let k = entries.len() - 1;
        RankingSequence {
            entries,
            original_index,
            k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    /// Candidates per original prompt.
    pub candidates: usize,
    /// Extra oracle draws allowed for replacing duplicates.
    pub retry_budget: usize,
    /// When set, ranking sequences keep only this many entries at each end.
    pub ranking_band: Option<usize>,
    pub generation: GenerationParams,
    pub split: SplitFractions,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            candidates: 16,
            retry_budget: 32,
            ranking_band: None,
            generation: GenerationParams {
                temperature: 0.0,
                ..Default::default()
            },
            split: SplitFractions::default(),
        }
    }
}

impl WarmupConfig {
    /// Scale used for the full-size run.
    pub fn full_scale() -> Self {
        Self {
            candidates: 1000,
            retry_budget: 2000,
            ..Default::default()
        }
    }
}

fn candidate(oracle: &PolicyHandle, original: &str, index: u64, params: &GenerationParams) -> Result<String> {
    match &oracle.backend {
        Backend::Paraphraser(p) => Ok(p.rewrite(original, index)),
        _ => oracle.generate_text(
            &stub::rewrite_instruction(original),
            &params.with_seed(params.seed.wrapping_add(index)),
        ),
    }
}

/// `n` distinct rewrites where possible. Duplicates (including copies of the
/// original) are replaced by further draws until `retry_budget` runs out, after
/// which remaining slots keep duplicates.
pub fn generate_candidates(
    oracle: &PolicyHandle,
    original: &str,
    n: usize,
    retry_budget: usize,
    params: &GenerationParams,
) -> Result<Vec<String>> {
    let first = paraphrase(oracle, original, n, params)?;
    let mut out: Vec<String> = Vec::with_capacity(n);
    let mut dupes = Vec::new();
    for c in first {
        if c == original || out.contains(&c) {
            dupes.push(c);
        } else {
            out.push(c);
        }
    }
    let mut next = n as u64;
    let mut budget = retry_budget;
    while out.len() < n && budget > 0 {
        let c = candidate(oracle, original, next, params)?;
        next += 1;
        budget -= 1;
        if c != original && !out.contains(&c) {
            out.push(c);
        }
    }
    let missing = n - out.len();
    out.extend(dupes.into_iter().take(missing));
    Ok(out)
}

/// Runs each prompt on the target and scores its output against `reference`.
/// Remote targets are queried concurrently; order is preserved either way.
pub fn score_candidates(
    target: &PolicyHandle,
    candidates: &[String],
    task: TaskKind,
    reference: &str,
    params: &GenerationParams,
) -> Result<Vec<ScoredCandidate>> {
    if reference.trim().is_empty() {
        return Err(MapoError::InvalidInput("reference output must be non-empty".into()));
    }
    let score_one = |prompt: &String| match target.generate_text(prompt, params) {
        Ok(output) => ScoredCandidate {
            score: score_for_task(task, &output, reference),
            prompt_text: prompt.clone(),
            generated_output: output,
            failed: false,
        },
        Err(e) => {
            log::warn!("target generation failed for candidate: {e}");
            ScoredCandidate {
                prompt_text: prompt.clone(),
                generated_output: String::new(),
                score: Score::ZERO,
                failed: true,
            }
        }
    };
    match &target.backend {
        Backend::Remote(client) if candidates.len() > 1 => {
            let workers = client.config().max_in_flight.min(candidates.len());
            let chunk = candidates.len().div_ceil(workers);
            let results = thread::scope(|s| {
                let handles: Vec<_> = candidates
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(score_one).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("scoring worker panicked"))
                    .collect()
            });
            Ok(results)
        }
        _ => Ok(candidates.iter().map(score_one).collect()),
    }
}

fn better(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    // Greater means `a` wins: higher score, then shorter text, then lexicographically smaller.
    a.score
        .value()
        .total_cmp(&b.score.value())
        .then_with(|| b.prompt_text.len().cmp(&a.prompt_text.len()))
        .then_with(|| b.prompt_text.cmp(&a.prompt_text))
}

/// Picks the optimal prompt; falls back to the original unless a candidate
/// strictly beats it.
pub fn search_optimal(record: &PromptRecord, reference: &str, scored: &[ScoredCandidate], score_original: Score) -> Result<PromptPair> {
    let best = scored
        .iter()
        .max_by(|a, b| better(a, b))
        .ok_or_else(|| MapoError::InvalidInput("no scored candidates".into()))?;
    let (optimized, score_optimized) = if best.score.value() > score_original.value() {
        (best.prompt_text.clone(), best.score)
    } else {
        (record.prompt.clone(), score_original)
    };
    Ok(PromptPair {
        original: record.prompt.clone(),
        optimized,
        task: record.task,
        dataset_name: record.dataset.clone(),
        reference_output: reference.to_string(),
        score_original,
        score_optimized,
    })
}

/// Stable ascending sort of candidates plus the original, with the original
/// placed after any candidates of equal score.
pub fn build_ranking_sequence(original: ScoredCandidate, scored: &[ScoredCandidate]) -> Result<RankingSequence> {
    if scored.is_empty() {
        return Err(MapoError::InvalidInput("no scored candidates".into()));
    }
    let k = scored.len();
    let mut tagged: Vec<(bool, ScoredCandidate)> = scored.iter().cloned().map(|c| (false, c)).collect();
    tagged.push((true, original));
    tagged.sort_by(|a, b| a.1.score.value().total_cmp(&b.1.score.value()));
    let original_index = tagged.iter().position(|(is_orig, _)| *is_orig).expect("original present");
    Ok(RankingSequence {
        entries: tagged.into_iter().map(|(_, c)| c).collect(),
        original_index,
        k,
    })
}

/// Every `(winner, loser)` with a strictly higher winner score.
pub fn enumerate_ranking_pairs(seq: &RankingSequence) -> Vec<(&ScoredCandidate, &ScoredCandidate)> {
    let e = &seq.entries;
    let mut out = Vec::new();
    for w in (0..e.len()).rev() {
        for l in 0..w {
            if e[w].score.value() > e[l].score.value() {
                out.push((&e[w], &e[l]));
            }
        }
    }
    out
}

/// Full warm-up construction for one prompt.
pub fn build_for_prompt(
    oracle: &PolicyHandle,
    target: &PolicyHandle,
    record: &PromptRecord,
    config: &WarmupConfig,
) -> Result<(PromptPair, RankingSequence)> {
    let params = &config.generation;
    let reference = match &record.reference {
        Some(r) => r.clone(),
        None => oracle.generate_text(&record.prompt, params)?,
    };
    let candidates = generate_candidates(oracle, &record.prompt, config.candidates, config.retry_budget, params)?;
    let scored = score_candidates(target, &candidates, record.task, &reference, params)?;
    let original = score_candidates(target, std::slice::from_ref(&record.prompt), record.task, &reference, params)?
        .pop()
        .expect("one prompt scored");
    let pair = search_optimal(record, &reference, &scored, original.score)?;
    let mut seq = build_ranking_sequence(original, &scored)?;
    if let Some(band) = config.ranking_band {
        seq = seq.truncate_band(band);
    }
    Ok((pair, seq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateEntry {
    pub text: String,
    pub score: f64,
}

/// One line of the warm-up JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupRecord {
    pub task: TaskKind,
    pub dataset: String,
    pub original: String,
    pub optimized: String,
    pub reference: String,
    pub score_original: f64,
    pub score_optimized: f64,
    /// Candidates excluding the original, ascending by score.
    pub candidates: Vec<CandidateEntry>,
}

impl WarmupRecord {
    pub fn new(pair: &PromptPair, seq: &RankingSequence) -> Self {
        let candidates = seq
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != seq.original_index)
            .map(|(_, c)| CandidateEntry {
                text: c.prompt_text.clone(),
                score: c.score.value(),
            })
            .collect();
        Self {
            task: pair.task,
            dataset: pair.dataset_name.clone(),
            original: pair.original.clone(),
            optimized: pair.optimized.clone(),
            reference: pair.reference_output.clone(),
            score_original: pair.score_original.value(),
            score_optimized: pair.score_optimized.value(),
            candidates,
        }
    }

    pub fn pair(&self) -> PromptPair {
        PromptPair {
            original: self.original.clone(),
            optimized: self.optimized.clone(),
            task: self.task,
            dataset_name: self.dataset.clone(),
            reference_output: self.reference.clone(),
            score_original: Score::new(self.score_original),
            score_optimized: Score::new(self.score_optimized),
        }
    }

    /// Rebuilds the ranking sequence; generated outputs are not persisted.
    pub fn ranking(&self) -> Result<RankingSequence> {
        let entry = |text: &str, score: f64| ScoredCandidate {
            prompt_text: text.to_string(),
            generated_output: String::new(),
            score: Score::new(score),
            failed: false,
        };
        let scored: Vec<ScoredCandidate> = self.candidates.iter().map(|c| entry(&c.text, c.score)).collect();
        build_ranking_sequence(entry(&self.original, self.score_original), &scored)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.score_original) || !in_unit(self.score_optimized) {
            return Err("scores must lie in [0, 1]".into());
        }
        if self.score_optimized < self.score_original {
            return Err("score_optimized is below score_original".into());
        }
        if self.candidates.iter().any(|c| !in_unit(c.score)) {
            return Err("candidate score outside [0, 1]".into());
        }
        if self.candidates.windows(2).any(|w| w[0].score > w[1].score) {
            return Err("candidates are not sorted by score".into());
        }
        Ok(())
    }
}

/// Writes `items` as UTF-8 JSONL, one object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<usize> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(items.len())
}

/// Reads JSONL, reporting the failing line on schema errors. Blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| MapoError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn emit_warmup_dataset(pairs: &[PromptPair], sequences: &[RankingSequence], path: &Path) -> Result<usize> {
    if pairs.len() != sequences.len() {
        return Err(MapoError::InvalidInput("one ranking sequence per pair is required".into()));
    }
    let records: Vec<WarmupRecord> = pairs
        .iter()
        .zip(sequences)
        .map(|(p, s)| WarmupRecord::new(p, s))
        .collect();
    write_jsonl(path, &records)
}

pub fn load_warmup_dataset(path: &Path) -> Result<Vec<WarmupRecord>> {
    let records: Vec<WarmupRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|message| MapoError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
    }
    Ok(records)
}

/// Train/validation/test shares; train takes whatever the others leave.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    /// `(train, val, test)` counts for `total` records.
    pub fn counts(&self, total: usize) -> (usize, usize, usize) {
        let val = ((total as f64 * self.val).round() as usize).min(total);
        let test = ((total as f64 * self.test).round() as usize).min(total - val);
        (total - val - test, val, test)
    }
}
