//! Supervised fine-tuning of the prompt rewriter on warm-up pairs.
//!
//! Each example is `task prefix + original prompt` mapped to the optimized
//! prompt. The loss is the per-token negative log-likelihood of the target
//! only; the prefix and original prompt are conditioning context.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{MapoError, Result};
use crate::lm::{PolicyHandle, ToyLm};
use crate::metrics::TaskKind;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Gradients;
use crate::rng;
use crate::tokenizer::EOS;
use crate::warmup::PromptPair;

pub const GENERATIVE_PREFIX: &str = "This is a generative task. ";
pub const QA_PREFIX: &str = "This is a question-answering task. ";
pub const CLASSIFICATION_PREFIX: &str = "This is a classification task. ";

pub fn task_prefix(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Generation => GENERATIVE_PREFIX,
        TaskKind::QuestionAnswering => QA_PREFIX,
        TaskKind::Classification => CLASSIFICATION_PREFIX,
    }
}

/// The rewriter's input for `original`.
pub fn rewriter_input(task: TaskKind, original: &str) -> String {
    format!("{}{original}", task_prefix(task))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub input_text: String,
    pub target_text: String,
    pub task: TaskKind,
}

pub fn format_sft_example(pair: &PromptPair) -> Result<SftExample> {
    if pair.original.trim().is_empty() || pair.optimized.trim().is_empty() {
        return Err(MapoError::InvalidInput("prompt pair has an empty prompt".into()));
    }
    Ok(SftExample {
        input_text: rewriter_input(pair.task, &pair.original),
        target_text: pair.optimized.clone(),
        task: pair.task,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 4,
            gradient_accumulation_steps: 8,
            weight_decay: 0.1,
            adam_eps: 1e-5,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.gradient_accumulation_steps > 0
            && self.adam_eps > 0.0;
        let lr_ok = self.learning_rate >= 0.0 && self.learning_rate.is_finite();
        if !positive || !lr_ok || !(self.weight_decay >= 0.0) {
            return Err(MapoError::Config(
                "sft: epochs, batch_size and gradient_accumulation_steps must be positive; learning_rate and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Hex digest of the serialized config.
    pub fn digest(&self) -> String {
        rng::digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Token ids of an example; the target ends with `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

/// Encodes examples, dropping (and counting) those that overflow the context.
pub fn encode_examples(lm: &ToyLm, examples: &[SftExample]) -> (Vec<EncodedExample>, usize) {
    let mut out = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for ex in examples {
        let prompt = lm.vocab.encode(&ex.input_text);
        let mut target = lm.vocab.encode(&ex.target_text);
        target.push(EOS);
        // <bos> prompt <sep> target, minus the final (never input) token
        let len = prompt.len() + target.len() + 1;
        if len > lm.config().context {
            log::warn!("skipping example of {len} tokens (context {})", lm.config().context);
            skipped += 1;
            continue;
        }
        out.push(EncodedExample { prompt, target });
    }
    (out, skipped)
}

/// Mean target-token NLL of one example, with its gradient added to `grads`
/// scaled by `weight`.
pub fn example_loss(lm: &ToyLm, ex: &EncodedExample, weight: f64, grads: Option<&mut Gradients>) -> Result<f64> {
    let mut g = Graph::new(lm.params());
    let vars = lm.completion_vars(&mut g, &ex.prompt, &ex.target)?;
    let mean_lp = g.mean(vars.token_logprobs);
    let loss = g.scale(mean_lp, -1.0);
    let value = g.scalar(loss);
    if let Some(grads) = grads {
        let mut local = g.backward(loss);
        local.scale(weight);
        grads.add(&local);
    }
    Ok(value)
}

/// Loss of one batch: the mean over examples of each example's mean token NLL.
/// Gradients of `scale * loss` are accumulated into `grads`.
pub fn sft_step(lm: &ToyLm, batch: &[EncodedExample], scale: f64, grads: &mut Gradients) -> Result<f64> {
    if batch.is_empty() {
        return Err(MapoError::InvalidInput("empty batch".into()));
    }
    let w = scale / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(lm, ex, w, Some(&mut *grads))?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean per-example loss over a dataset, without gradients.
pub fn dataset_loss(lm: &ToyLm, data: &[EncodedExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(MapoError::InvalidInput("empty dataset".into()));
    }
    let mut total = 0.0;
    for ex in data {
        total += example_loss(lm, ex, 0.0, None)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftLog {
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub skipped: usize,
}

impl SftLog {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.loss)
    }
}

#[derive(Serialize)]
struct CheckpointManifest<'a> {
    epoch: usize,
    loss: f64,
    seed: u64,
    config_hash: &'a str,
}

fn check_finite(component: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MapoError::NonFiniteLoss {
            component: component.to_string(),
            value,
        })
    }
}

/// Fine-tunes the actor in place. When `checkpoint_root` is set, every epoch
/// is saved under `checkpoint_root/epoch_<n>/`. Epoch losses are the mean
/// training-set loss after the epoch's updates.
pub fn train_sft(
    model: &mut PolicyHandle,
    dataset: &[SftExample],
    config: &SftConfig,
    checkpoint_root: Option<&Path>,
) -> Result<SftLog> {
    if dataset.is_empty() {
        return Err(MapoError::InvalidInput("sft dataset is empty".into()));
    }
    let lm = model
        .toy_mut()
        .ok_or(MapoError::Unsupported("frozen or non-trainable"))?;
    let (data, skipped) = encode_examples(lm, dataset);
    if data.is_empty() {
        return Err(MapoError::InvalidInput("every sft example overflows the context".into()));
    }
    let initial_loss = check_finite("sft", dataset_loss(lm, &data)?)?;
    let mut log = SftLog {
        initial_loss,
        epochs: Vec::new(),
        skipped,
    };
    if config.epochs == 0 {
        return Ok(log);
    }
    config.validate()?;
    let hash = config.digest();
    let mut opt = AdamW::new(config.optimizer(), lm.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_step = config.batch_size * config.gradient_accumulation_steps;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng::rng_for(config.seed, &["sft-shuffle", &epoch.to_string()]));
        for step in order.chunks(per_step) {
            let mut grads = Gradients::zeros_like(lm.params());
            let micro: Vec<&[usize]> = step.chunks(config.batch_size).collect();
            let scale = 1.0 / micro.len() as f64;
            for idx in &micro {
                let batch: Vec<EncodedExample> = idx.iter().map(|&i| data[i].clone()).collect();
                check_finite("sft", sft_step(lm, &batch, scale, &mut grads)?)?;
            }
            if !grads.is_finite() {
                return Err(MapoError::NonFiniteLoss {
                    component: "sft gradient".into(),
                    value: grads.global_norm(),
                });
            }
            opt.step(lm.params_mut(), &grads);
        }
        let loss = check_finite("sft", dataset_loss(lm, &data)?)?;
        log::info!("sft epoch {epoch}: loss {loss:.4}");
        if let Some(root) = checkpoint_root {
            let dir = root.join(format!("epoch_{epoch}"));
            lm.save(&dir)?;
            let manifest = CheckpointManifest {
                epoch,
                loss,
                seed: config.seed,
                config_hash: &hash,
            };
            fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        }
        log.epochs.push(EpochRecord { epoch, loss });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TransformerConfig;
    use crate::metrics::Score;
    use crate::tensor::Matrix;
    use crate::tokenizer::Vocab;

    fn pair(task: TaskKind, original: &str, optimized: &str) -> PromptPair {
        PromptPair {
            original: original.into(),
            optimized: optimized.into(),
            task,
            dataset_name: "toy".into(),
            reference_output: "r".into(),
            score_original: Score::ZERO,
            score_optimized: Score::ZERO,
        }
    }

    fn tiny_lm(corpus: &[&str]) -> ToyLm {
        let vocab = Vocab::build(corpus.iter().copied(), 64);
        let cfg = TransformerConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            context: 32,
            ..Default::default()
        };
        ToyLm::new(vocab, cfg, 11).unwrap()
    }

    #[test]
    fn prefixes_by_task() {
        let g = format_sft_example(&pair(TaskKind::Generation, "write x", "compose x")).unwrap();
        assert!(g.input_text.starts_with("This is a generative task."));
        assert_eq!(g.target_text, "compose x");
        let q = format_sft_example(&pair(TaskKind::QuestionAnswering, "a", "a")).unwrap();
        assert_eq!(q.input_text, "This is a question-answering task. a");
        assert_eq!(q.target_text, "a");
        let c = format_sft_example(&pair(TaskKind::Classification, "a", "b")).unwrap();
        assert!(c.input_text.starts_with(CLASSIFICATION_PREFIX));
        assert!(format_sft_example(&pair(TaskKind::Generation, "", "b")).is_err());
        for task in TaskKind::ALL {
            let ex = format_sft_example(&pair(task, "p", "q")).unwrap();
            let hits = TaskKind::ALL.iter().filter(|t| ex.input_text.starts_with(task_prefix(**t))).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn formatting_is_injective() {
        let originals = ["write a summary", "write a summary ", "give an answer", "sort this"];
        let mut seen = std::collections::BTreeSet::new();
        for task in TaskKind::ALL {
            for o in originals {
                assert!(seen.insert(format_sft_example(&pair(task, o, "x")).unwrap().input_text));
            }
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut lm = tiny_lm(&["a b c"]);
        let head = lm.params().id_of("lm_head").unwrap();
        let (r, c) = lm.params().get(head).shape();
        *lm.params_mut().get_mut(head) = Matrix::zeros(r, c);
        let ex = EncodedExample {
            prompt: vec![5, 6],
            target: vec![7, 6, EOS],
        };
        let mut grads = Gradients::zeros_like(lm.params());
        let loss = sft_step(&lm, &[ex], 1.0, &mut grads).unwrap();
        assert!((loss - (lm.vocab_size() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_means_compose() {
        let lm = tiny_lm(&["a b c d e"]);
        let data: Vec<EncodedExample> = (0..4)
            .map(|i| EncodedExample {
                prompt: vec![5 + i, 6],
                target: vec![7, 8 - i % 2, EOS],
            })
            .collect();
        let mut g = Gradients::zeros_like(lm.params());
        let full = sft_step(&lm, &data, 1.0, &mut g).unwrap();
        let a = sft_step(&lm, &data[..2], 1.0, &mut g).unwrap();
        let b = sft_step(&lm, &data[2..], 1.0, &mut g).unwrap();
        assert!(((a + b) / 2.0 - full).abs() < 1e-6);
        assert!(full >= 0.0);
    }

    #[test]
    fn overflow_examples_are_skipped() {
        let lm = tiny_lm(&["a"]);
        let long = "a ".repeat(40);
        let ex = [
            SftExample {
                input_text: long.clone(),
                target_text: "a".into(),
                task: TaskKind::Generation,
            },
            SftExample {
                input_text: "a".into(),
                target_text: "a".into(),
                task: TaskKind::Generation,
            },
        ];
        let (data, skipped) = encode_examples(&lm, &ex);
        assert_eq!((data.len(), skipped), (1, 1));
    }

    fn copy_dataset() -> Vec<SftExample> {
        let words = ["red", "blue", "green", "cat", "dog", "fish", "sun", "moon"];
        (0..200)
            .map(|i| {
                let a = words[i % 8];
                let b = words[(i / 8) % 8];
                let c = words[(i / 3) % 8];
                let text = format!("{a} {b} {c}");
                SftExample {
                    input_text: rewriter_input(TaskKind::Generation, &text),
                    target_text: text,
                    task: TaskKind::Generation,
                }
            })
            .collect()
    }

    #[test]
    fn copy_task_halves_loss_and_is_deterministic() {
        let data = copy_dataset();
        let corpus: Vec<&str> = data.iter().map(|e| e.input_text.as_str()).collect();
        let lm = tiny_lm(&corpus);
        let config = SftConfig {
            epochs: 4,
            learning_rate: 1e-2,
            batch_size: 8,
            gradient_accumulation_steps: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut a = PolicyHandle::actor(lm.clone());
        let log_a = train_sft(&mut a, &data, &config, Some(dir.path())).unwrap();
        assert!(log_a.final_loss() < 0.5 * log_a.initial_loss, "{log_a:?}");
        assert!(dir.path().join("epoch_4/params.bin").exists());
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("epoch_2/manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["epoch"], 2);
        assert_eq!(manifest["config_hash"], config.digest());

        let mut b = PolicyHandle::actor(lm);
        let log_b = train_sft(&mut b, &data, &config, None).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.toy().unwrap().params(), b.toy().unwrap().params());
    }

    #[test]
    fn zero_epochs_and_zero_lr_are_no_ops() {
        let data = copy_dataset();
        let corpus: Vec<&str> = data.iter().map(|e| e.input_text.as_str()).collect();
        let lm = tiny_lm(&corpus);
        let mut h = PolicyHandle::actor(lm.clone());
        let log = train_sft(&mut h, &data[..10], &SftConfig { epochs: 0, ..Default::default() }, None).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(h.toy().unwrap(), &lm);

        let zero_lr = SftConfig {
            epochs: 2,
            learning_rate: 0.0,
            batch_size: 2,
            gradient_accumulation_steps: 2,
            ..Default::default()
        };
        train_sft(&mut h, &data[..10], &zero_lr, None).unwrap();
        assert_eq!(h.toy().unwrap(), &lm);
    }

    #[test]
    fn frozen_models_cannot_be_trained() {
        let mut frozen = PolicyHandle::actor(tiny_lm(&["a"])).clone_frozen().unwrap();
        let ex = [SftExample {
            input_text: "a".into(),
            target_text: "a".into(),
            task: TaskKind::Generation,
        }];
        assert!(matches!(
            train_sft(&mut frozen, &ex, &SftConfig::default(), None),
            Err(MapoError::Unsupported(_))
        ));
    }
}
