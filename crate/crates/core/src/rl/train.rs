//! The RL training loop and inference entry point.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::losses::{group_episodes, group_terms, pretrain_grads, value_loss_grads, BatchStats};
use super::{collect_rollouts, compute_advantages, Critic, Episode, LossWeights, RlPrompt};
use crate::autograd::Graph;
use crate::error::{MapoError, Result};
use crate::lm::{GenerationParams, PolicyHandle, ToyLm};
use crate::metrics::TaskKind;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Gradients;
use crate::reward::RewardModel;
use crate::rng;
use crate::sft::rewriter_input;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Outer steps; each collects fresh rollouts.
    pub steps: usize,
    pub prompts_per_step: usize,
    /// Rewrites sampled per prompt; they also form the rank-loss groups.
    pub rrmf_k: usize,
    #[serde(rename = "learning_rate_for_actor_model")]
    pub actor_learning_rate: f64,
    #[serde(rename = "learning_rate_for_critic_model")]
    pub critic_learning_rate: f64,
    pub weight_decay: f64,
    #[serde(rename = "adam_optimizer_epsilon")]
    pub adam_eps: f64,
    pub generation: GenerationParams,
    /// General-text sequences per update.
    pub pretrain_batch_size: usize,
    /// Save the actor every this many steps (and at the last step); 0 saves only the last.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            prompts_per_step: 4,
            rrmf_k: 4,
            actor_learning_rate: 2e-5,
            critic_learning_rate: 1e-5,
            weight_decay: 0.1,
            adam_eps: 1e-5,
            generation: GenerationParams {
                temperature: 1.0,
                max_tokens: 24,
                seed: 0,
            },
            pretrain_batch_size: 4,
            checkpoint_every: 50,
            seed: 0,
            loss: LossWeights::recommended(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.generation.validate()?;
        let lr_ok = |x: f64| x >= 0.0 && x.is_finite();
        if self.prompts_per_step == 0 || self.rrmf_k == 0 {
            return Err(MapoError::Config("prompts_per_step and rrmf_k must be positive".into()));
        }
        if !lr_ok(self.actor_learning_rate) || !lr_ok(self.critic_learning_rate) || !(self.weight_decay >= 0.0) {
            return Err(MapoError::Config("learning rates and weight_decay must be >= 0".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(MapoError::Config("adam_optimizer_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        rng::digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// The four models of the RL stage.
#[derive(Clone, Debug)]
pub struct RlModels {
    pub actor: PolicyHandle,
    /// Frozen copy of the actor's starting point.
    pub reference: PolicyHandle,
    pub critic: Critic,
    pub reward: RewardModel,
}

impl RlModels {
    /// Actor and reference start from `sft`; the critic starts from the reward model.
    pub fn new(sft: ToyLm, reward: RewardModel) -> Result<Self> {
        let actor = PolicyHandle::actor(sft);
        let reference = actor.clone_frozen()?;
        Ok(Self {
            actor,
            reference,
            critic: Critic::from_reward(&reward),
            reward,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub kl_per_token: f64,
    pub l_pg: f64,
    pub l_v: f64,
    pub l_rexp: f64,
    pub l_kl: f64,
    pub l_rank: f64,
    pub l_ft: f64,
    pub l_pre: f64,
    pub l_joint: f64,
}

#[derive(Default)]
struct Totals {
    pg: f64,
    v: f64,
    rexp: f64,
    kl: f64,
    rank: f64,
    ft: f64,
    pre: f64,
    count: usize,
}

fn finite(component: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MapoError::NonFiniteLoss {
            component: component.to_string(),
            value,
        })
    }
}

fn minibatches<'a>(groups: &[Vec<&'a Episode>], size: usize) -> Vec<Vec<&'a Episode>> {
    let mut out: Vec<Vec<&Episode>> = Vec::new();
    let mut current: Vec<&Episode> = Vec::new();
    for g in groups {
        current.extend(g.iter().copied());
        if current.len() >= size {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Serialize)]
struct CheckpointManifest<'a> {
    step: usize,
    loss: f64,
    seed: u64,
    config_hash: &'a str,
}

/// Runs `config.steps` outer steps. With `out_dir`, metrics are appended to
/// `out_dir/metrics.jsonl` and actor checkpoints go to `out_dir/step_<n>/`.
pub fn train_rl(
    models: &mut RlModels,
    prompts: &[RlPrompt],
    pretrain: &[Vec<u32>],
    config: &RlConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    if prompts.is_empty() {
        return Err(MapoError::InvalidInput("no RL prompts".into()));
    }
    let mut log = Vec::new();
    if config.steps == 0 {
        return Ok(log);
    }
    config.validate()?;
    let w = config.loss;
    let hash = config.digest();
    let reference = models
        .reference
        .toy()
        .ok_or(MapoError::Unsupported("non-toy reference"))?
        .clone();
    let mut actor_opt = AdamW::new(
        config.optimizer(config.actor_learning_rate),
        models.actor.toy().ok_or(MapoError::Unsupported("non-toy actor"))?.params(),
    );
    let mut critic_opt = AdamW::new(config.optimizer(config.critic_learning_rate), &models.critic.net.params);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.jsonl"), b"")?;
    }

    for step in 1..=config.steps {
        let step_label = step.to_string();
        let mut pick = rng::rng_for(config.seed, &["rl-prompts", &step_label]);
        let chosen: Vec<RlPrompt> = prompts
            .choose_multiple(&mut pick, config.prompts_per_step.min(prompts.len()))
            .cloned()
            .collect();
        let params = config
            .generation
            .with_seed(rng::derive_seed(config.seed, &["rl-rollout", &step_label]));
        let actor = models
            .actor
            .toy_mut()
            .ok_or(MapoError::Unsupported("frozen or non-toy actor"))?;
        let mut batch = collect_rollouts(
            actor,
            &reference,
            &models.critic,
            &models.reward,
            &chosen,
            config.rrmf_k,
            &params,
        )?;
        if batch.episodes.is_empty() {
            return Err(MapoError::InvalidInput(format!("step {step}: every rollout failed")));
        }
        compute_advantages(&mut batch, &w);

        let mut totals = Totals::default();
        let all: Vec<&Episode> = batch.episodes.iter().collect();
        let mut groups = group_episodes(&all);
        for epoch in 0..w.ppo_epochs {
            groups.shuffle(&mut rng::rng_for(config.seed, &["rl-minibatch", &step_label, &epoch.to_string()]));
            for (mb_index, mb) in minibatches(&groups, w.mini_batch_size).iter().enumerate() {
                let stats = BatchStats::of(mb);
                let mut actor_grads = Gradients::zeros_like(actor.params());
                let (mut pg, mut rexp, mut kl, mut rank, mut ft) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for group in group_episodes(mb) {
                    let mut g = Graph::new(actor.params());
                    let t = group_terms(&mut g, actor, &reference, &group, &stats, &w)?;
                    pg += g.scalar(t.pg);
                    rexp += g.scalar(t.rexp);
                    kl += g.scalar(t.kl);
                    rank += g.scalar(t.rank);
                    ft += g.scalar(t.ft);
                    let total = g.weighted_sum(&[
                        (w.gamma1 * w.alpha1, t.pg),
                        (w.gamma1 * w.alpha3, t.rexp),
                        (w.gamma2 * w.beta1, t.kl),
                        (w.gamma2 * w.beta2, t.ft),
                        (w.gamma2 * w.beta3, t.rank),
                    ]);
                    actor_grads.add(&g.backward(total));
                }
                let mut pre = 0.0;
                if !pretrain.is_empty() && w.gamma3 != 0.0 {
                    let mut r = rng::rng_for(
                        config.seed,
                        &["rl-pretrain", &step_label, &epoch.to_string(), &mb_index.to_string()],
                    );
                    let sample: Vec<Vec<u32>> = pretrain
                        .choose_multiple(&mut r, config.pretrain_batch_size.min(pretrain.len()))
                        .cloned()
                        .collect();
                    let (value, mut grads) = pretrain_grads(actor, &sample, &w)?;
                    pre = value;
                    grads.scale(w.gamma3);
                    actor_grads.add(&grads);
                }
                let (v, mut critic_grads) = value_loss_grads(&models.critic, mb, &w)?;
                critic_grads.scale(w.gamma1 * w.alpha2);

                for (name, value) in [
                    ("l_pg", pg),
                    ("l_v", v),
                    ("l_rexp", rexp),
                    ("l_kl", kl),
                    ("l_rank", rank),
                    ("l_ft", ft),
                    ("l_pre", pre),
                ] {
                    finite(name, value)?;
                }
                if !actor_grads.is_finite() || !critic_grads.is_finite() {
                    return Err(MapoError::NonFiniteLoss {
                        component: "gradient".into(),
                        value: f64::NAN,
                    });
                }
                actor_grads.clip_global_norm(w.max_grad_norm);
                critic_grads.clip_global_norm(w.max_grad_norm);
                actor_opt.step(actor.params_mut(), &actor_grads);
                critic_opt.step(&mut models.critic.net.params, &critic_grads);

                if epoch == 0 {
                    totals.pg += pg;
                    totals.v += v;
                    totals.rexp += rexp;
                    totals.kl += kl;
                    totals.rank += rank;
                    totals.ft += ft;
                    totals.pre += pre;
                    totals.count += 1;
                }
            }
        }

        let n = totals.count.max(1) as f64;
        let (l_pg, l_v, l_rexp, l_kl, l_rank, l_ft, l_pre) = (
            totals.pg / n,
            totals.v / n,
            totals.rexp / n,
            totals.kl / n,
            totals.rank / n,
            totals.ft / n,
            totals.pre / n,
        );
        let l_rho = super::combined_policy_loss(&w, l_pg, l_v, l_rexp);
        let l_sft = super::sft_approx_loss(&w, l_kl, l_ft, l_rank);
        let metrics = StepMetrics {
            step,
            mean_reward: batch.mean_reward(),
            kl_per_token: batch.sampled_kl(),
            l_pg,
            l_v,
            l_rexp,
            l_kl,
            l_rank,
            l_ft,
            l_pre,
            l_joint: finite("l_joint", super::joint_loss(&w, l_rho, l_sft, l_pre))?,
        };
        log::info!(
            "rl step {step}: reward {:.4} kl {:.4} joint {:.4}",
            metrics.mean_reward,
            metrics.kl_per_token,
            metrics.l_joint
        );
        if let Some(dir) = out_dir {
            let mut f = OpenOptions::new().append(true).open(dir.join("metrics.jsonl"))?;
            serde_json::to_writer(&mut f, &metrics)?;
            f.write_all(b"\n")?;
            let due = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
            if due || step == config.steps {
                let ckpt = dir.join(format!("step_{step}"));
                actor.save(&ckpt)?;
                let manifest = CheckpointManifest {
                    step,
                    loss: metrics.l_joint,
                    seed: config.seed,
                    config_hash: &hash,
                };
                fs::write(ckpt.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
            }
        }
        log.push(metrics);
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    /// Mean reward-model score of the sampled rewrites.
    pub mean_reward: f64,
    /// Sampled estimate of KL(policy || reference) per response token.
    pub kl_per_token: f64,
    pub samples: usize,
}

/// Samples `samples_per_prompt` rewrites of each prompt from `policy` with
/// per-sample seeds derived from `params.seed`, scores them with `reward`
/// and estimates the per-token KL to `reference` on the same samples.
pub fn summarize_policy(
    policy: &ToyLm,
    reference: &ToyLm,
    reward: &RewardModel,
    prompts: &[RlPrompt],
    samples_per_prompt: usize,
    params: &GenerationParams,
) -> Result<PolicySummary> {
    let (mut reward_sum, mut kl_sum, mut tokens, mut samples) = (0.0, 0.0, 0usize, 0usize);
    for (i, p) in prompts.iter().enumerate() {
        let input = policy.vocab.encode(&rewriter_input(p.task, &p.original));
        for j in 0..samples_per_prompt {
            let seed = rng::derive_seed(params.seed, &["policy-summary", &i.to_string(), &j.to_string()]);
            let ids = policy.generate_ids(&input, &params.with_seed(seed))?;
            reward_sum += reward.score(&p.original, &policy.vocab.decode(&ids))?;
            let own = policy.sequence_logprob(&input, &ids)?;
            let base = reference.sequence_logprob(&input, &ids)?;
            kl_sum += own.per_token.iter().sum::<f64>() - base.per_token.iter().sum::<f64>();
            tokens += ids.len();
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(MapoError::InvalidInput("no prompts to summarize".into()));
    }
    Ok(PolicySummary {
        mean_reward: reward_sum / samples as f64,
        kl_per_token: kl_sum / tokens.max(1) as f64,
        samples,
    })
}

/// Rewrites `original` with the trained actor: task prefix, then one decode.
pub fn optimize_prompt(actor: &PolicyHandle, task: TaskKind, original: &str, params: &GenerationParams) -> Result<String> {
    actor.generate_text(&rewriter_input(task, original), params)
}
