//! Scalar reward model: the fine-tuned backbone with its vocabulary head
//! swapped for a linear projection to one number, trained with a pairwise
//! ranking loss so that better prompts score higher.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{MapoError, Result};
use crate::lm::toy::{load_model, save_model};
use crate::lm::{ToyLm, Transformer};
use crate::metrics::Score;
use crate::optim::AdamW;
use crate::params::{Gradients, ParamId};
use crate::rng;
use crate::sft::SftConfig;
use crate::tensor::Matrix;
use crate::tokenizer::{Vocab, BOS, SEP};
use crate::warmup::{enumerate_ranking_pairs, WarmupRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub net: Transformer,
    head_w: ParamId,
    head_b: ParamId,
    pub vocab: Vocab,
}

impl RewardModel {
    /// Copies the backbone of `lm` and attaches a zero-initialized scalar head.
    pub fn from_lm(lm: &ToyLm) -> Self {
        let mut net = lm.net.backbone_copy();
        let d = net.config.d_model;
        let head_w = net.add_param("score_w", Matrix::zeros(d, 1));
        let head_b = net.add_param("score_b", Matrix::zeros(1, 1));
        Self {
            net,
            head_w,
            head_b,
            vocab: lm.vocab.clone(),
        }
    }

    pub fn bias(&self) -> f64 {
        self.net.params.get(self.head_b).item()
    }

    pub fn set_bias(&mut self, value: f64) {
        *self.net.params.get_mut(self.head_b) = Matrix::scalar(value);
    }

    /// `<bos> x <sep> y`
    pub fn input_ids(&self, x: &str, y: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(x));
        ids.push(SEP);
        ids.extend(self.vocab.encode(y));
        ids
    }

    /// Score node: the head applied to the final hidden state of the last token.
    pub fn score_var(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        let h = self.net.hidden(g, ids)?;
        let last = g.slice_rows(h, ids.len() - 1, 1);
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let s = g.matmul(last, w);
        Ok(g.add(s, b))
    }

    pub fn score_ids(&self, ids: &[u32]) -> Result<f64> {
        let mut g = Graph::new(&self.net.params);
        let v = self.score_var(&mut g, ids)?;
        Ok(g.scalar(v))
    }

    pub fn score(&self, x: &str, y: &str) -> Result<f64> {
        self.score_ids(&self.input_ids(x, y))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(dir, "reward", &self.net.config, &self.vocab, &self.net.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = load_model(dir, "reward")?;
        let find = |n: &str| {
            params
                .id_of(n)
                .ok_or_else(|| MapoError::InvalidInput(format!("missing parameter `{n}`")))
        };
        let head_w = find("score_w")?;
        let head_b = find("score_b")?;
        Ok(Self {
            net: Transformer::from_store(manifest.config, params)?,
            head_w,
            head_b,
            vocab: Vocab::from_tokens(manifest.vocab),
        })
    }
}

/// Ranking pairs that share one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingPairBatch {
    pub x: String,
    /// `(winner, loser)` prompts.
    pub items: Vec<(String, String)>,
    /// Size of the source ranking sequence.
    pub k: usize,
}

impl RankingPairBatch {
    /// All strict pairs of a warm-up record's ranking; `None` if every entry ties.
    pub fn from_record(record: &WarmupRecord) -> Result<Option<Self>> {
        let seq = record.ranking()?;
        let items: Vec<(String, String)> = enumerate_ranking_pairs(&seq)
            .into_iter()
            .filter(|(w, l)| w.prompt_text != l.prompt_text)
            .map(|(w, l)| (w.prompt_text.clone(), l.prompt_text.clone()))
            .collect();
        if items.is_empty() {
            return Ok(None);
        }
        Ok(Some(Self {
            x: record.original.clone(),
            items,
            k: seq.entries.len(),
        }))
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() || self.k < 2 {
            return Err(MapoError::InvalidInput("ranking batch needs pairs and k >= 2".into()));
        }
        if self.items.iter().any(|(w, l)| w == l) {
            return Err(MapoError::InvalidInput("winner equals loser".into()));
        }
        Ok(())
    }

    /// Flattened JSONL records.
    pub fn records(&self) -> Vec<RankingPairRecord> {
        self.items
            .iter()
            .map(|(w, l)| RankingPairRecord {
                x: self.x.clone(),
                y_w: w.clone(),
                y_l: l.clone(),
                k: self.k,
            })
            .collect()
    }

    /// Regroups consecutive records sharing `x` and `k`.
    pub fn group(records: &[RankingPairRecord]) -> Vec<RankingPairBatch> {
        let mut out: Vec<RankingPairBatch> = Vec::new();
        for r in records {
            match out.last_mut() {
                Some(b) if b.x == r.x && b.k == r.k => b.items.push((r.y_w.clone(), r.y_l.clone())),
                _ => out.push(RankingPairBatch {
                    x: r.x.clone(),
                    items: vec![(r.y_w.clone(), r.y_l.clone())],
                    k: r.k,
                }),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingPairRecord {
    pub x: String,
    pub y_w: String,
    pub y_l: String,
    pub k: usize,
}

fn pairs_of(k: usize) -> f64 {
    (k * (k - 1) / 2) as f64
}

/// Loss of one batch from per-pair margins: `-(1/C(k,2)) * mean log sigmoid(margin)`.
pub fn ranking_loss_from_margins(margins: &[f64], k: usize) -> f64 {
    let mean = margins.iter().map(|&m| crate::autograd::log_sigmoid(m)).sum::<f64>() / margins.len() as f64;
    -mean / pairs_of(k)
}

/// Builds the ranking loss node for `batch`, scoring each distinct prompt once.
pub fn ranking_loss_var(model: &RewardModel, g: &mut Graph, batch: &RankingPairBatch) -> Result<Var> {
    batch.validate()?;
    let distinct: BTreeSet<&str> = batch
        .items
        .iter()
        .flat_map(|(w, l)| [w.as_str(), l.as_str()])
        .collect();
    let mut scores = std::collections::BTreeMap::new();
    for y in distinct {
        let ids = model.input_ids(&batch.x, y);
        scores.insert(y, model.score_var(g, &ids)?);
    }
    let mut terms = Vec::with_capacity(batch.items.len());
    for (w, l) in &batch.items {
        let margin = g.sub(scores[w.as_str()], scores[l.as_str()]);
        terms.push(g.log_sigmoid(margin));
    }
    let stacked = g.concat_rows(&terms);
    let mean = g.mean(stacked);
    Ok(g.scale(mean, -1.0 / pairs_of(batch.k)))
}

pub fn pairwise_ranking_loss(model: &RewardModel, batch: &RankingPairBatch) -> Result<f64> {
    let mut g = Graph::new(&model.net.params);
    let v = ranking_loss_var(model, &mut g, batch)?;
    Ok(g.scalar(v))
}

fn correct_pairs(model: &RewardModel, batch: &RankingPairBatch) -> Result<usize> {
    let mut cache = std::collections::BTreeMap::new();
    let mut score = |y: &str| -> Result<f64> {
        if let Some(&s) = cache.get(y) {
            return Ok(s);
        }
        let s = model.score(&batch.x, y)?;
        cache.insert(y.to_string(), s);
        Ok(s)
    };
    let mut correct = 0;
    for (w, l) in &batch.items {
        if score(w)? > score(l)? {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Fraction of pairs whose winner scores strictly higher.
pub fn pairwise_accuracy(model: &RewardModel, batch: &RankingPairBatch) -> Result<Score> {
    pairwise_accuracy_all(model, std::slice::from_ref(batch))
}

/// Pair-weighted accuracy across several batches.
pub fn pairwise_accuracy_all(model: &RewardModel, batches: &[RankingPairBatch]) -> Result<Score> {
    let total: usize = batches.iter().map(|b| b.items.len()).sum();
    if total == 0 {
        return Err(MapoError::InvalidInput("no ranking pairs".into()));
    }
    let mut correct = 0;
    for b in batches {
        correct += correct_pairs(model, b)?;
    }
    Ok(Score::new(correct as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_accuracy: Option<f64>,
}

/// Minimizes the ranking loss over `train`, one source sequence per
/// micro-batch. Held-out accuracy is logged after every epoch.
pub fn train_reward(
    model: &mut RewardModel,
    train: &[RankingPairBatch],
    heldout: &[RankingPairBatch],
    config: &SftConfig,
) -> Result<Vec<RewardEpoch>> {
    if train.is_empty() {
        return Err(MapoError::InvalidInput("no ranking pairs to train on".into()));
    }
    let mut log = Vec::new();
    if config.epochs == 0 {
        return Ok(log);
    }
    config.validate()?;
    let mut opt = AdamW::new(config.optimizer(), &model.net.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_step = config.batch_size * config.gradient_accumulation_steps;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng::rng_for(config.seed, &["reward-shuffle", &epoch.to_string()]));
        let mut epoch_loss = 0.0;
        for step in order.chunks(per_step) {
            let mut grads = Gradients::zeros_like(&model.net.params);
            for &i in step {
                let mut g = Graph::new(&model.net.params);
                let loss = ranking_loss_var(model, &mut g, &train[i])?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(MapoError::NonFiniteLoss {
                        component: "reward ranking".into(),
                        value,
                    });
                }
                epoch_loss += value;
                let mut local = g.backward(loss);
                local.scale(1.0 / step.len() as f64);
                grads.add(&local);
            }
            opt.step(&mut model.net.params, &grads);
        }
        let heldout_accuracy = if heldout.is_empty() {
            None
        } else {
            Some(pairwise_accuracy_all(model, heldout)?.value())
        };
        let loss = epoch_loss / train.len() as f64;
        log::info!("reward epoch {epoch}: loss {loss:.4} held-out accuracy {heldout_accuracy:?}");
        log.push(RewardEpoch {
            epoch,
            loss,
            heldout_accuracy,
        });
    }
    Ok(log)
}

/// Shifts the head bias so that the mean score of `anchors` is zero.
/// Margins, and hence the loss and accuracy, are unchanged.
pub fn calibrate_bias(model: &mut RewardModel, anchors: &[(String, String)]) -> Result<f64> {
    if anchors.is_empty() {
        return Ok(model.bias());
    }
    let mut total = 0.0;
    for (x, y) in anchors {
        total += model.score(x, y)?;
    }
    let shift = total / anchors.len() as f64;
    let bias = model.bias() - shift;
    model.set_bias(bias);
    Ok(bias)
}

/// Lowest-ranked candidate of every record, used as the zero point of the score scale.
pub fn bottom_anchors(records: &[WarmupRecord]) -> Vec<(String, String)> {
    records
        .iter()
        .filter_map(|r| {
            let seq = r.ranking().ok()?;
            Some((r.original.clone(), seq.entries[0].prompt_text.clone()))
        })
        .collect()
}

pub fn write_pairs(path: &Path, batches: &[RankingPairBatch]) -> Result<usize> {
    let records: Vec<RankingPairRecord> = batches.iter().flat_map(|b| b.records()).collect();
    crate::warmup::write_jsonl(path, &records)
}

pub fn read_pairs(path: &Path) -> Result<Vec<RankingPairBatch>> {
    let records: Vec<RankingPairRecord> = crate::warmup::read_jsonl(path)?;
    Ok(RankingPairBatch::group(&records))
}

/// Saves `model` plus a manifest of its training log.
pub fn save_with_log(model: &RewardModel, log: &[RewardEpoch], dir: &Path) -> Result<()> {
    model.save(dir)?;
    fs::write(dir.join("training_log.json"), serde_json::to_vec_pretty(log)?)?;
    Ok(())
}
