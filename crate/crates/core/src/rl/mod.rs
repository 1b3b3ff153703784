//! Reinforcement-learning refinement of the rewriter.
//!
//! Each step samples several rewrites per prompt from the actor, scores them
//! with the frozen reward model, and minimizes a joint objective made of
//! three groups:
//!
//! * policy optimization: clipped PPO surrogate with entropy bonus, critic
//!   regression, and a score-function estimate of the expected reward;
//! * staying close to supervised behaviour: KL to the SFT reference, a rank
//!   loss aligning length-normalized likelihoods with reward order, and
//!   cross-entropy on the best-scoring rewrite;
//! * general likelihood on a small sample of general-task text.

pub mod critic;
pub mod losses;
pub mod rollout;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{MapoError, Result};

pub use critic::Critic;
pub use losses::{
    combined_policy_loss, joint_loss, kl_sft_loss, policy_loss, pretrain_loss, reward_expectation_loss,
    rrmf_best_ce_loss, rrmf_normalized_logprob, rrmf_rank_loss, sft_approx_loss, value_loss,
};
pub use rollout::{collect_rollouts, compute_advantages, RlPrompt};
pub use train::{optimize_prompt, summarize_policy, train_rl, PolicySummary, RlConfig, RlModels, StepMetrics};

/// One sampled token of a rewrite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub token: u32,
    /// Log-probability under the actor that sampled the rollout.
    pub behavior_logprob: f64,
    /// Log-probability under the frozen SFT reference.
    pub reference_logprob: f64,
    pub value_estimate: f64,
    pub reward: f64,
    pub advantage: f64,
    pub value_target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Index of the source prompt within the step's prompt list.
    pub prompt_index: usize,
    /// The original prompt, as shown to the reward model.
    pub original: String,
    /// Rewriter input ids (task prefix and original prompt).
    pub input_ids: Vec<u32>,
    /// Sampled rewrite ids, ending with `<eos>` unless truncated.
    pub response_ids: Vec<u32>,
    pub response_text: String,
    pub transitions: Vec<Transition>,
    pub terminal_reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub episodes: Vec<Episode>,
    /// Episodes dropped because generation or scoring failed.
    pub dropped: usize,
}

impl RolloutBatch {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.terminal_reward).sum::<f64>() / self.episodes.len() as f64
    }

    /// Sampled per-token KL estimate `mean(log pi_actor - log pi_ref)` at rollout time.
    pub fn sampled_kl(&self) -> f64 {
        let n = self.num_transitions();
        if n == 0 {
            return 0.0;
        }
        self.episodes
            .iter()
            .flat_map(|e| &e.transitions)
            .map(|t| t.behavior_logprob - t.reference_logprob)
            .sum::<f64>()
            / n as f64
    }

    /// Episodes grouped by source prompt, in prompt order.
    pub fn groups(&self) -> Vec<Vec<&Episode>> {
        let mut out: std::collections::BTreeMap<usize, Vec<&Episode>> = Default::default();
        for e in &self.episodes {
            out.entry(e.prompt_index).or_default().push(e);
        }
        out.into_values().collect()
    }
}

/// Coefficients of every loss term plus the PPO and GAE settings.
/// Serialized keys match the configuration file names.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Policy-optimization group: surrogate, critic, reward expectation.
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// KL-to-reference coefficient.
    pub beta_kl: f64,
    /// Reference-approximation group: KL, best-response cross-entropy, rank.
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub pretrain_coef: f64,
    /// Joint objective: policy group, reference group, general likelihood.
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    #[serde(rename = "gamma")]
    pub discount_gamma: f64,
    pub gae_lambda: f64,
    #[serde(rename = "clip_parameter")]
    pub clip_epsilon: f64,
    /// Use the plain ratio-times-advantage surrogate instead of the clipped one.
    pub unclipped_surrogate: bool,
    #[serde(rename = "entropy_coefficient")]
    pub entropy_coef: f64,
    #[serde(rename = "value_loss_coefficient")]
    pub value_coef: f64,
    pub ppo_epochs: usize,
    #[serde(rename = "max_gradient_norm")]
    pub max_grad_norm: f64,
    pub mini_batch_size: usize,
    #[serde(rename = "positive_lambda_coefficient")]
    pub lambda_pos: f64,
    #[serde(rename = "negative_lambda_coefficient")]
    pub lambda_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            beta_kl: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            pretrain_coef: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
            discount_gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            unclipped_surrogate: false,
            entropy_coef: 0.005,
            value_coef: 0.5,
            ppo_epochs: 20,
            max_grad_norm: 0.5,
            mini_batch_size: 32,
            lambda_pos: 1.0,
            lambda_neg: 1.0,
        }
    }
}

impl LossWeights {
    /// Defaults with the rank-hinge scales set to 2.0 / 1.8.
    pub fn recommended() -> Self {
        Self {
            lambda_pos: 2.0,
            lambda_neg: 1.8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coefs = [
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.beta_kl,
            self.beta1,
            self.beta2,
            self.beta3,
            self.pretrain_coef,
            self.gamma1,
            self.gamma2,
            self.gamma3,
            self.entropy_coef,
            self.value_coef,
            self.max_grad_norm,
            self.lambda_pos,
            self.lambda_neg,
        ];
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(MapoError::Config("loss coefficients must be finite".into()));
        }
        if !(self.discount_gamma > 0.0 && self.discount_gamma <= 1.0) {
            return Err(MapoError::Config("gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(MapoError::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(MapoError::Config("clip_parameter must be positive".into()));
        }
        if self.ppo_epochs == 0 || self.mini_batch_size == 0 || !(self.max_grad_norm > 0.0) {
            return Err(MapoError::Config(
                "ppo_epochs, mini_batch_size and max_gradient_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rewrites of one prompt with their reward scores and normalized likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct RrmfBatch {
    pub x: String,
    /// `(response ids, reward score, normalized log-probability)`.
    pub responses: Vec<(Vec<u32>, f64, f64)>,
    pub best_index: usize,
}

impl RrmfBatch {
    pub fn new(x: String, responses: Vec<(Vec<u32>, f64, f64)>) -> Result<Self> {
        if responses.is_empty() {
            return Err(MapoError::InvalidInput("rank batch needs responses".into()));
        }
        let best_index = best_index(responses.iter().map(|r| r.1));
        Ok(Self {
            x,
            responses,
            best_index,
        })
    }
}

/// Index of the maximum, ties to the lowest index.
pub fn best_index(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.into_iter().enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_table() {
        let w = LossWeights::default();
        assert_eq!(w.discount_gamma, 0.99);
        assert_eq!(w.gae_lambda, 0.95);
        assert_eq!(w.clip_epsilon, 0.2);
        assert_eq!(w.entropy_coef, 0.005);
        assert_eq!(w.value_coef, 0.5);
        assert_eq!(w.ppo_epochs, 20);
        assert_eq!(w.max_grad_norm, 0.5);
        assert_eq!(w.mini_batch_size, 32);
        assert_eq!((w.lambda_pos, w.lambda_neg), (1.0, 1.0));
        let p = LossWeights::recommended();
        assert_eq!((p.lambda_pos, p.lambda_neg), (2.0, 1.8));
        assert!(w.validate().is_ok());
        assert!(LossWeights { discount_gamma: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { clip_epsilon: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { alpha1: f64::NAN, ..w }.validate().is_err());
    }

    #[test]
    fn weight_keys_use_table_names() {
        let v = serde_json::to_value(LossWeights::default()).unwrap();
        for key in [
            "gamma",
            "gae_lambda",
            "clip_parameter",
            "entropy_coefficient",
            "value_loss_coefficient",
            "ppo_epochs",
            "max_gradient_norm",
            "mini_batch_size",
            "positive_lambda_coefficient",
            "negative_lambda_coefficient",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn best_index_ties_to_lowest() {
        assert_eq!(best_index([0.1, 0.9, 0.9, 0.2]), 1);
        assert_eq!(best_index([0.5]), 0);
        let b = RrmfBatch::new("x".into(), vec![(vec![5], 0.3, -1.0), (vec![6], 0.3, -2.0)]).unwrap();
        assert_eq!(b.best_index, 0);
    }
}
