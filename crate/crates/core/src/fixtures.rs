//! Synthetic data for the toy world: instruction prompts over a small
//! content vocabulary, general-task text, and a planted-preference ranking
//! set for reward-model checks.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::stub::{self, PreferenceTarget, StubParaphraser};
use crate::lm::{PolicyHandle, ToyLm, TransformerConfig};
use crate::metrics::{Score, TaskKind};
use crate::reward::RankingPairBatch;
use crate::sft::{rewriter_input, train_sft, SftConfig, SftExample, CLASSIFICATION_PREFIX, GENERATIVE_PREFIX, QA_PREFIX};
use crate::rng;
use crate::tokenizer::Vocab;
use crate::warmup::{build_ranking_sequence, enumerate_ranking_pairs, PromptRecord, ScoredCandidate};

pub const CONTENT_WORDS: &[&str] = &[
    "rain", "storm", "river", "market", "stock", "price", "team", "match", "goal", "school", "teacher",
    "student", "city", "bridge", "traffic", "forest", "fire", "island", "ship", "harbor", "doctor",
    "patient", "vaccine", "film", "actor", "award", "planet", "rocket", "moon", "farm", "harvest",
    "wheat", "museum", "painting", "artist", "election", "vote", "mayor", "coffee", "festival",
];

const TEMPLATES: &[(TaskKind, &str)] = &[
    (TaskKind::Generation, "write a short summary of the text about {}"),
    (TaskKind::Generation, "describe the topic of the text about {}"),
    (TaskKind::Generation, "write a headline for the text about {}"),
    (TaskKind::QuestionAnswering, "answer the question about {}"),
    (TaskKind::QuestionAnswering, "give a short answer to the question about {}"),
    (TaskKind::Classification, "classify the topic of this headline : {}"),
    (TaskKind::Classification, "classify the text about {}"),
];

const GENERAL_FRAMES: &[&str] = &[
    "the {} and the {} are in the {}",
    "a {} is on the {} with the {}",
    "this {} is for the {} of the {}",
];

fn content_phrase(rng: &mut impl Rng, n: usize) -> String {
    let mut words: Vec<&str> = Vec::with_capacity(n);
    while words.len() < n {
        let w = CONTENT_WORDS.choose(rng).expect("content words");
        if !words.contains(w) {
            words.push(w);
        }
    }
    words.join(" ")
}

/// `n` instruction prompts spread over the three tasks, each carrying three
/// or four content words and no ground-truth reference.
pub fn toy_prompts(n: usize, seed: u64) -> Vec<PromptRecord> {
    let mut rng = rng::rng_for(seed, &["toy-prompts"]);
    (0..n)
        .map(|i| {
            let (task, template) = TEMPLATES[i % TEMPLATES.len()];
            let k = rng.random_range(3..=4);
            PromptRecord {
                task,
                dataset: format!("toy-{}", task.as_str()),
                prompt: template.replace("{}", &content_phrase(&mut rng, k)),
                reference: None,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralText {
    pub text: String,
}

/// Short declarative sentences over the content vocabulary.
pub fn general_texts(n: usize, seed: u64) -> Vec<GeneralText> {
    let mut rng = rng::rng_for(seed, &["general-texts"]);
    (0..n)
        .map(|_| {
            let frame = GENERAL_FRAMES.choose(&mut rng).expect("frames");
            let mut text = frame.to_string();
            while text.contains("{}") {
                let w = CONTENT_WORDS.choose(&mut rng).expect("content words");
                text = text.replacen("{}", w, 1);
            }
            GeneralText { text }
        })
        .collect()
}

/// Vocabulary covering the lexicon, task prefixes, content words and `extra` text.
pub fn toy_vocab<'a>(extra: impl IntoIterator<Item = &'a str>) -> Vocab {
    let mut corpus: Vec<String> = vec![
        stub::lexicon().join(" "),
        CONTENT_WORDS.join(" "),
        GENERATIVE_PREFIX.to_string(),
        QA_PREFIX.to_string(),
        CLASSIFICATION_PREFIX.to_string(),
        GENERAL_FRAMES.join(" ").replace("{}", ""),
        TEMPLATES.iter().map(|t| t.1).collect::<Vec<_>>().join(" ").replace("{}", ""),
    ];
    corpus.extend(extra.into_iter().map(str::to_string));
    Vocab::build(corpus.iter().map(String::as_str), crate::lm::transformer::MAX_VOCAB)
}

/// Ranking batches whose order is a planted, hidden feature: the number of
/// distinct preferred words in each candidate. Sequences are generated
/// until `pairs` ranking pairs exist; the last batch is trimmed to hit the
/// count exactly.
pub fn planted_rankings(pairs: usize, seed: u64) -> Vec<RankingPairBatch> {
    let target = PreferenceTarget::default();
    let oracle = StubParaphraser {
        seed,
        max_ops: 3,
    };
    let mut out: Vec<RankingPairBatch> = Vec::new();
    let mut have = 0;
    let mut i = 0u64;
    while have < pairs {
        let prompt = &toy_prompts(1, rng::derive_seed(seed, &["planted", &i.to_string()]))[0].prompt;
        i += 1;
        let scored = |text: &str| ScoredCandidate {
            prompt_text: text.to_string(),
            generated_output: String::new(),
            score: Score::new(target.preferred_count(text) as f64 / 10.0),
            failed: false,
        };
        let candidates: Vec<ScoredCandidate> = oracle.paraphrase(prompt, 6).iter().map(|c| scored(c)).collect();
        let seq = build_ranking_sequence(scored(prompt), &candidates).expect("candidates present");
        let mut items: Vec<(String, String)> = enumerate_ranking_pairs(&seq)
            .into_iter()
            .filter(|(w, l)| w.prompt_text != l.prompt_text)
            .map(|(w, l)| (w.prompt_text.clone(), l.prompt_text.clone()))
            .collect();
        items.dedup();
        if items.is_empty() {
            continue;
        }
        items.truncate(pairs - have);
        have += items.len();
        out.push(RankingPairBatch {
            x: prompt.clone(),
            items,
            k: seq.entries.len(),
        });
    }
    out
}

/// A toy model fine-tuned to echo generative-task prompts unchanged, used to
/// check the inference path end to end.
pub fn train_copy_model(texts: &[String], epochs: usize, seed: u64) -> Result<ToyLm> {
    let vocab = toy_vocab(texts.iter().map(String::as_str));
    let lm = ToyLm::new(vocab.clone(), TransformerConfig { vocab_size: vocab.len(), ..Default::default() }, seed)?;
    let examples: Vec<SftExample> = texts
        .iter()
        .map(|t| SftExample {
            input_text: rewriter_input(TaskKind::Generation, t),
            target_text: t.clone(),
            task: TaskKind::Generation,
        })
        .collect();
    let mut handle = PolicyHandle::actor(lm);
    let config = SftConfig {
        epochs,
        batch_size: 4,
        gradient_accumulation_steps: 1,
        seed,
        ..SftConfig::default()
    };
    train_sft(&mut handle, &examples, &config, None)?;
    Ok(handle.toy().expect("actor is a toy model").clone())
}
