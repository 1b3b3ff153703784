//! Sampling rewrites from the actor and turning terminal rewards into
//! per-token advantages.

use serde::{Deserialize, Serialize};

use super::{Critic, Episode, LossWeights, RolloutBatch, Transition};
use crate::error::Result;
use crate::lm::{GenerationParams, ToyLm};
use crate::metrics::TaskKind;
use crate::reward::RewardModel;
use crate::rng;
use crate::sft::rewriter_input;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlPrompt {
    pub task: TaskKind,
    pub original: String,
}

/// Samples `samples_per_prompt` rewrites of every prompt and records the
/// actor, reference and critic views of each token. The reward-model score
/// is attached to the final token; all other per-token rewards are zero.
/// Sample `j` of prompt `i` uses a seed derived from `(params.seed, i, j)`.
pub fn collect_rollouts(
    actor: &ToyLm,
    reference: &ToyLm,
    critic: &Critic,
    reward: &RewardModel,
    prompts: &[RlPrompt],
    samples_per_prompt: usize,
    params: &GenerationParams,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch::default();
    for (i, prompt) in prompts.iter().enumerate() {
        let input_ids = actor.vocab.encode(&rewriter_input(prompt.task, &prompt.original));
        for j in 0..samples_per_prompt {
            let seed = rng::derive_seed(params.seed, &["rollout", &i.to_string(), &j.to_string()]);
            match rollout_one(actor, reference, critic, reward, prompt, i, &input_ids, &params.with_seed(seed)) {
                Ok(ep) => batch.episodes.push(ep),
                Err(e) => {
                    log::warn!("dropping rollout for prompt {i}: {e}");
                    batch.dropped += 1;
                }
            }
        }
    }
    Ok(batch)
}

#[allow(clippy::too_many_arguments)]
fn rollout_one(
    actor: &ToyLm,
    reference: &ToyLm,
    critic: &Critic,
    reward: &RewardModel,
    prompt: &RlPrompt,
    prompt_index: usize,
    input_ids: &[u32],
    params: &GenerationParams,
) -> Result<Episode> {
    let response_ids = actor.generate_ids(input_ids, params)?;
    let response_text = actor.vocab.decode(&response_ids);
    let terminal_reward = reward.score(&prompt.original, &response_text)?;
    let behavior = actor.sequence_logprob(input_ids, &response_ids)?;
    let reference_lp = reference.sequence_logprob(input_ids, &response_ids)?;
    let values = critic.response_values(input_ids, &response_ids)?;
    let n = response_ids.len();
    let transitions = (0..n)
        .map(|t| Transition {
            token: response_ids[t],
            behavior_logprob: behavior.per_token[t],
            reference_logprob: reference_lp.per_token[t],
            value_estimate: values[t],
            reward: if t + 1 == n { terminal_reward } else { 0.0 },
            advantage: 0.0,
            value_target: 0.0,
        })
        .collect();
    Ok(Episode {
        prompt_index,
        original: prompt.original.clone(),
        input_ids: input_ids.to_vec(),
        response_ids,
        response_text,
        transitions,
        terminal_reward,
    })
}

/// Generalized advantage estimation per episode, with `V` after the final
/// token taken as 0. The regression target is `r + V_next`.
pub fn compute_advantages(batch: &mut RolloutBatch, w: &LossWeights) {
    for ep in &mut batch.episodes {
        let n = ep.transitions.len();
        let mut running = 0.0;
        for t in (0..n).rev() {
            let v_next = if t + 1 < n { ep.transitions[t + 1].value_estimate } else { 0.0 };
            let tr = &mut ep.transitions[t];
            let delta = tr.reward + w.discount_gamma * v_next - tr.value_estimate;
            running = delta + w.discount_gamma * w.gae_lambda * running;
            tr.advantage = running;
            tr.value_target = tr.reward + v_next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(rewards: &[f64], values: &[f64]) -> RolloutBatch {
        let transitions = rewards
            .iter()
            .zip(values)
            .map(|(&r, &v)| Transition {
                token: 5,
                behavior_logprob: -1.0,
                reference_logprob: -1.0,
                value_estimate: v,
                reward: r,
                advantage: 0.0,
                value_target: 0.0,
            })
            .collect();
        RolloutBatch {
            episodes: vec![Episode {
                prompt_index: 0,
                original: String::new(),
                input_ids: vec![],
                response_ids: vec![5; rewards.len()],
                response_text: String::new(),
                transitions,
                terminal_reward: *rewards.last().unwrap(),
            }],
            dropped: 0,
        }
    }

    #[test]
    fn single_step_anchor() {
        // r=1, V_next=0.5, V_cur=0.3 at step 0
        let mut b = episode(&[1.0, 0.0], &[0.3, 0.5]);
        let w = LossWeights {
            gae_lambda: 0.0,
            ..Default::default()
        };
        compute_advantages(&mut b, &w);
        let t = &b.episodes[0].transitions[0];
        assert!((t.advantage - 1.195).abs() < 1e-12);
        assert!((t.value_target - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_signal_gives_zero_advantage() {
        let mut b = episode(&[0.0; 4], &[0.0; 4]);
        compute_advantages(&mut b, &LossWeights::default());
        assert!(b.episodes[0].transitions.iter().all(|t| t.advantage == 0.0));
    }

    #[test]
    fn lambda_one_is_discounted_return_minus_value() {
        let rewards = [0.1, 0.0, -0.3, 0.0, 1.0];
        let values = [0.2, -0.1, 0.4, 0.05, 0.3];
        let mut b = episode(&rewards, &values);
        let w = LossWeights {
            gae_lambda: 1.0,
            discount_gamma: 0.9,
            ..Default::default()
        };
        compute_advantages(&mut b, &w);
        for t in 0..5 {
            let ret: f64 = (t..5).map(|k| 0.9f64.powi((k - t) as i32) * rewards[k]).sum();
            assert!((b.episodes[0].transitions[t].advantage - (ret - values[t])).abs() < 1e-12);
        }
    }
}
