//! The trainable in-process language model: transformer backbone, a linear
//! vocabulary head, and a word-level [`Vocab`].
//!
//! Sequences are laid out as `<bos> prompt <sep> completion <eos>`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Transformer, TransformerConfig};
use super::{GenerationParams, SequenceLogProb, TokenSequence};
use crate::autograd::{Graph, Var};
use crate::error::{MapoError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Matrix;
use crate::tokenizer::{Vocab, BOS, EOS, SEP};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm {
    pub net: Transformer,
    lm_head: ParamId,
    pub vocab: Vocab,
}

/// Graph nodes for the completion part of a sequence.
pub struct CompletionVars {
    /// `n x 1` log-probabilities of the completion tokens.
    pub token_logprobs: Var,
    /// `n x V` next-token log-distributions at the positions that emit them.
    pub dists: Var,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ModelManifest {
    pub kind: String,
    pub config: TransformerConfig,
    pub vocab: Vec<String>,
}

impl ToyLm {
    pub fn new(vocab: Vocab, config: TransformerConfig, seed: u64) -> Result<Self> {
        let config = TransformerConfig {
            vocab_size: vocab.len(),
            ..config
        };
        let mut net = Transformer::new(config, seed)?;
        let mut init = rng::rng_for(seed, &["lm-head"]);
        let a = 0.5 * (3.0 / config.d_model as f64).sqrt();
        let head = Matrix::from_vec(
            config.d_model,
            config.vocab_size,
            (0..config.d_model * config.vocab_size)
                .map(|_| init.random_range(-a..a))
                .collect(),
        );
        let lm_head = net.add_param("lm_head", head);
        Ok(Self { net, lm_head, vocab })
    }

    pub fn from_parts(vocab: Vocab, config: TransformerConfig, params: ParamStore) -> Result<Self> {
        if vocab.len() != config.vocab_size {
            return Err(MapoError::InvalidInput("vocabulary size does not match model".into()));
        }
        let lm_head = params
            .id_of("lm_head")
            .ok_or_else(|| MapoError::InvalidInput("missing parameter `lm_head`".into()))?;
        let net = Transformer::from_store(config, params)?;
        Ok(Self { net, lm_head, vocab })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.net.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.net.params
    }

    pub fn vocab_size(&self) -> usize {
        self.net.config.vocab_size
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = self.vocab.encode(text);
        TokenSequence {
            text: self.vocab.decode(&ids),
            token_ids: ids,
        }
    }

    pub fn decode(&self, ids: &[u32]) -> TokenSequence {
        TokenSequence {
            token_ids: ids.to_vec(),
            text: self.vocab.decode(ids),
        }
    }

    /// `<bos> prompt <sep>`
    pub fn context_ids(prompt: &[u32]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(prompt.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        ids.push(SEP);
        ids
    }

    /// Row `t` is the log-distribution over the token following `tokens[..=t]`.
    pub fn log_probs(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let h = self.net.hidden(g, tokens)?;
        let w = g.param(self.lm_head);
        let logits = g.matmul(h, w);
        Ok(g.log_softmax(logits))
    }

    /// Log-probabilities of `completion` given `<bos> prompt <sep>`.
    pub fn completion_vars(&self, g: &mut Graph, prompt: &[u32], completion: &[u32]) -> Result<CompletionVars> {
        if completion.is_empty() {
            return Err(MapoError::EmptyCompletion);
        }
        let mut seq = Self::context_ids(prompt);
        let start = seq.len() - 1;
        seq.extend_from_slice(completion);
        // the final token is never an input position
        let inputs = &seq[..seq.len() - 1];
        let lp = self.log_probs(g, inputs)?;
        let dists = g.slice_rows(lp, start, completion.len());
        let cols: Vec<usize> = completion.iter().map(|&t| t as usize).collect();
        let token_logprobs = g.pick(dists, &cols);
        Ok(CompletionVars { token_logprobs, dists })
    }

    pub fn sequence_logprob(&self, prompt: &[u32], completion: &[u32]) -> Result<SequenceLogProb> {
        let mut g = Graph::new(self.params());
        let vars = self.completion_vars(&mut g, prompt, completion)?;
        Ok(SequenceLogProb::new(g.value(vars.token_logprobs).data().to_vec()))
    }

    /// Per-token log-probabilities of a whole sequence scored from `<bos>`.
    pub fn text_logprob(&self, tokens: &[u32]) -> Result<SequenceLogProb> {
        let mut g = Graph::new(self.params());
        let vars = self.plain_sequence_vars(&mut g, tokens)?;
        Ok(SequenceLogProb::new(g.value(vars).data().to_vec()))
    }

    /// `n x 1` log-probabilities of `<bos> tokens` predicting `tokens <eos>`.
    pub fn plain_sequence_vars(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let mut seq = Vec::with_capacity(tokens.len() + 2);
        seq.push(BOS);
        seq.extend_from_slice(tokens);
        seq.push(EOS);
        let lp = self.log_probs(g, &seq[..seq.len() - 1])?;
        let cols: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        Ok(g.pick(lp, &cols))
    }

    /// Next-token log-distribution after `tokens`.
    pub fn next_token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.params());
        let lp = self.log_probs(&mut g, tokens)?;
        let m = g.value(lp);
        Ok(m.row(m.rows() - 1).to_vec())
    }

    /// Samples a completion for `prompt`. The returned ids end with `<eos>`
    /// when the model emitted it within `max_tokens`.
    pub fn generate_ids(&self, prompt: &[u32], params: &GenerationParams) -> Result<Vec<u32>> {
        params.validate()?;
        let mut seq = Self::context_ids(prompt);
        let needed = seq.len() + params.max_tokens - 1;
        if needed > self.net.config.context {
            return Err(MapoError::ContextOverflow {
                len: needed,
                context: self.net.config.context,
            });
        }
        let mut rng = rng::stream(params.seed, 0);
        let mut out = Vec::new();
        for _ in 0..params.max_tokens {
            let lp = self.next_token_logprobs(&seq)?;
            let next = sample_token(&lp, params.temperature, &mut rng);
            out.push(next);
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }

    pub fn generate(&self, prompt: &TokenSequence, params: &GenerationParams) -> Result<TokenSequence> {
        let ids = self.generate_ids(&prompt.token_ids, params)?;
        Ok(self.decode(&ids))
    }

    pub fn generate_text(&self, prompt: &str, params: &GenerationParams) -> Result<String> {
        let prompt = self.encode(prompt);
        Ok(self.generate(&prompt, params)?.text)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(dir, "lm", self.config(), &self.vocab, self.params())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = load_model(dir, "lm")?;
        let vocab = Vocab::from_tokens(manifest.vocab);
        Self::from_parts(vocab, manifest.config, params)
    }
}

/// Temperature-scaled sampling; temperature 0 is argmax with ties to the lowest id.
pub fn sample_token(logprobs: &[f64], temperature: f64, rng: &mut impl Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &x) in logprobs.iter().enumerate() {
            if x > logprobs[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let scaled: Vec<f64> = logprobs.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}

pub(crate) fn save_model(
    dir: &Path,
    kind: &str,
    config: &TransformerConfig,
    vocab: &Vocab,
    params: &ParamStore,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        kind: kind.to_string(),
        config: *config,
        vocab: (0..vocab.len() as u32).map(|i| vocab.token(i).to_string()).collect(),
    };
    fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut blob = Vec::new();
    params.write_to(&mut blob)?;
    fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

pub(crate) fn load_model(dir: &Path, kind: &str) -> Result<(ModelManifest, ParamStore)> {
    let manifest_path = dir.join("model.json");
    if !manifest_path.exists() {
        return Err(MapoError::MissingCheckpoint(dir.to_path_buf()));
    }
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.kind != kind {
        return Err(MapoError::InvalidInput(format!(
            "{} holds a `{}` model, expected `{kind}`",
            dir.display(),
            manifest.kind
        )));
    }
    let params = ParamStore::read_from(fs::read(dir.join("params.bin"))?.as_slice())?;
    Ok((manifest, params))
}
