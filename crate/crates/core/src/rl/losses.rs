//! Loss terms of the RL objective.
//!
//! Terms that depend on the actor are built per prompt group inside one
//! autograd graph, already divided by the batch-level normalizers, so that
//! summing group contributions gives the batch loss and its gradient.

use crate::autograd::{Graph, Var};
use crate::error::{MapoError, Result};
use crate::lm::ToyLm;
use crate::params::Gradients;
use crate::tensor::Matrix;
use crate::tokenizer::BOS;

use super::{best_index, Critic, Episode, LossWeights, RolloutBatch, RrmfBatch};

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Loss value and derivative w.r.t. the current log-probability of one token.
fn surrogate_term(logprob: f64, behavior: f64, advantage: f64, w: &LossWeights) -> (f64, f64) {
    let ratio = (logprob - behavior).exp();
    if w.unclipped_surrogate {
        return (-ratio * advantage, -ratio * advantage);
    }
    let eps = w.clip_epsilon;
    let plain = ratio * advantage;
    let inside = (1.0 - eps..=1.0 + eps).contains(&ratio);
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if plain <= clipped || inside {
        (-plain.min(clipped), -plain)
    } else {
        (-clipped, 0.0)
    }
}

/// `a1 * pg + a2 * v + a3 * r`
pub fn combined_policy_loss(w: &LossWeights, l_pg: f64, l_v: f64, l_rexp: f64) -> f64 {
    w.alpha1 * l_pg + w.alpha2 * l_v + w.alpha3 * l_rexp
}

/// `b1 * kl + b2 * ft + b3 * rank`
pub fn sft_approx_loss(w: &LossWeights, l_kl: f64, l_ft: f64, l_rank: f64) -> f64 {
    w.beta1 * l_kl + w.beta2 * l_ft + w.beta3 * l_rank
}

/// `g1 * policy + g2 * reference + g3 * pretrain`
pub fn joint_loss(w: &LossWeights, l_rho: f64, l_sft: f64, l_pre: f64) -> f64 {
    w.gamma1 * l_rho + w.gamma2 * l_sft + w.gamma3 * l_pre
}

/// Scaled hinge sum over reward-ordered pairs. A pair `(i, j)` with
/// `r_i < r_j` costs `max(0, p_i - p_j)`, scaled by `lambda_pos` when `j`
/// is the best response and by `lambda_neg` otherwise.
pub fn rank_hinge(p: &[f64], r: &[f64], w: &LossWeights) -> f64 {
    let best = best_index(r.iter().copied());
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if r[i] < r[j] {
                let scale = if j == best { w.lambda_pos } else { w.lambda_neg };
                total += scale * (p[i] - p[j]).max(0.0);
            }
        }
    }
    total
}

pub fn rrmf_rank_loss(batch: &RrmfBatch, w: &LossWeights) -> Result<f64> {
    if batch.responses.len() < 2 {
        return Err(MapoError::InvalidInput("rank loss needs at least two responses".into()));
    }
    let p: Vec<f64> = batch.responses.iter().map(|r| r.2).collect();
    let r: Vec<f64> = batch.responses.iter().map(|r| r.1).collect();
    Ok(rank_hinge(&p, &r, w))
}

/// Mean log-probability per response token.
pub fn rrmf_normalized_logprob(lm: &ToyLm, input: &[u32], response: &[u32]) -> Result<f64> {
    Ok(lm.sequence_logprob(input, response)?.mean())
}

/// Negative log-likelihood of the whole best response.
pub fn rrmf_best_ce_loss(lm: &ToyLm, input: &[u32], best_response: &[u32]) -> Result<f64> {
    Ok(-lm.sequence_logprob(input, best_response)?.total)
}

/// `coef * mean (V_pred - target)^2`
pub fn value_loss_from(predicted: &[f64], targets: &[f64], coef: f64) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let sse: f64 = predicted.iter().zip(targets).map(|(v, t)| (v - t) * (v - t)).sum();
    coef * sse / predicted.len() as f64
}

/// Normalizers shared by every group of a minibatch.
#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    pub transitions: usize,
    pub episodes: usize,
    pub groups: usize,
    pub mean_reward: f64,
}

impl BatchStats {
    pub fn of(episodes: &[&Episode]) -> Self {
        let mut groups: Vec<usize> = episodes.iter().map(|e| e.prompt_index).collect();
        groups.sort_unstable();
        groups.dedup();
        let n = episodes.len().max(1);
        Self {
            transitions: episodes.iter().map(|e| e.transitions.len()).sum::<usize>().max(1),
            episodes: n,
            groups: groups.len().max(1),
            mean_reward: episodes.iter().map(|e| e.terminal_reward).sum::<f64>() / n as f64,
        }
    }
}

/// Actor-dependent terms of one prompt group, each scaled to its share of
/// the batch value.
pub struct GroupTerms {
    pub pg: Var,
    pub kl: Var,
    pub rexp: Var,
    pub rank: Var,
    pub ft: Var,
}

/// Which actor-dependent term to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorTerm {
    Policy,
    Kl,
    RewardExpectation,
    Rank,
    BestCrossEntropy,
}

impl ActorTerm {
    pub const ALL: [ActorTerm; 5] = [
        ActorTerm::Policy,
        ActorTerm::Kl,
        ActorTerm::RewardExpectation,
        ActorTerm::Rank,
        ActorTerm::BestCrossEntropy,
    ];

    pub fn pick(self, t: &GroupTerms) -> Var {
        match self {
            ActorTerm::Policy => t.pg,
            ActorTerm::Kl => t.kl,
            ActorTerm::RewardExpectation => t.rexp,
            ActorTerm::Rank => t.rank,
            ActorTerm::BestCrossEntropy => t.ft,
        }
    }
}

fn reference_dists(reference: &ToyLm, ep: &Episode) -> Result<Matrix> {
    let mut g = Graph::new(reference.params());
    let vars = reference.completion_vars(&mut g, &ep.input_ids, &ep.response_ids)?;
    Ok(g.value(vars.dists).clone())
}

/// Builds every actor term for the episodes of one prompt.
pub fn group_terms(
    g: &mut Graph,
    lm: &ToyLm,
    reference: &ToyLm,
    group: &[&Episode],
    stats: &BatchStats,
    w: &LossWeights,
) -> Result<GroupTerms> {
    let per_token = 1.0 / stats.transitions as f64;
    let mut pg_parts = Vec::new();
    let mut kl_parts = Vec::new();
    let mut rexp_parts = Vec::new();
    let mut means = Vec::new();
    let mut totals = Vec::new();
    for ep in group {
        let vars = lm.completion_vars(g, &ep.input_ids, &ep.response_ids)?;
        let lp = vars.token_logprobs;

        let behavior: Vec<f64> = ep.transitions.iter().map(|t| t.behavior_logprob).collect();
        let adv: Vec<f64> = ep.transitions.iter().map(|t| t.advantage).collect();
        let surrogate = g.map_indexed(lp, |i, x| surrogate_term(x, behavior[i], adv[i], w));
        let surrogate = g.sum(surrogate);
        let probs = g.exp(vars.dists);
        let plogp = g.mul(probs, vars.dists);
        let neg_entropy = g.sum(plogp);
        pg_parts.push((per_token, surrogate));
        pg_parts.push((w.entropy_coef * per_token, neg_entropy));

        let ref_d = g.constant(reference_dists(reference, ep)?);
        let diff = g.sub(vars.dists, ref_d);
        let kl = g.mul(probs, diff);
        let kl = g.sum(kl);
        kl_parts.push((w.beta_kl * per_token, kl));

        let total = g.sum(lp);
        // mean over episodes of (R - mean of the other rewards) * log pi(y)
        let loo = if stats.episodes > 1 {
            (ep.terminal_reward - stats.mean_reward) / (stats.episodes - 1) as f64
        } else {
            0.0
        };
        rexp_parts.push((-loo, total));
        totals.push(total);
        means.push(g.mean(lp));
    }
    let pg = g.weighted_sum(&pg_parts);
    let kl = g.weighted_sum(&kl_parts);
    let rexp = g.weighted_sum(&rexp_parts);

    let per_group = 1.0 / stats.groups as f64;
    let rewards: Vec<f64> = group.iter().map(|e| e.terminal_reward).collect();
    let best = best_index(rewards.iter().copied());
    let mut rank_parts = Vec::new();
    for i in 0..group.len() {
        for j in 0..group.len() {
            if rewards[i] < rewards[j] {
                let scale = if j == best { w.lambda_pos } else { w.lambda_neg };
                let d = g.sub(means[i], means[j]);
                let h = g.hinge(d);
                rank_parts.push((scale * per_group, h));
            }
        }
    }
    let rank = g.weighted_sum(&rank_parts);
    let ft = g.scale(totals[best], -per_group);
    Ok(GroupTerms {
        pg,
        kl,
        rexp,
        rank,
        ft,
    })
}

/// Value and gradient of one actor term over a whole batch.
pub fn actor_term(
    lm: &ToyLm,
    reference: &ToyLm,
    episodes: &[&Episode],
    w: &LossWeights,
    term: ActorTerm,
) -> Result<(f64, Gradients)> {
    let stats = BatchStats::of(episodes);
    let mut grads = Gradients::zeros_like(lm.params());
    let mut value = 0.0;
    for group in group_episodes(episodes) {
        let mut g = Graph::new(lm.params());
        let terms = group_terms(&mut g, lm, reference, &group, &stats, w)?;
        let v = term.pick(&terms);
        value += g.scalar(v);
        grads.add(&g.backward(v));
    }
    Ok((value, grads))
}

/// Splits episodes into prompt groups, preserving first-seen order.
pub fn group_episodes<'a>(episodes: &[&'a Episode]) -> Vec<Vec<&'a Episode>> {
    let mut out: Vec<Vec<&Episode>> = Vec::new();
    for &e in episodes {
        match out.iter_mut().find(|g| g[0].prompt_index == e.prompt_index) {
            Some(g) => g.push(e),
            None => out.push(vec![e]),
        }
    }
    out
}

fn all(batch: &RolloutBatch) -> Vec<&Episode> {
    batch.episodes.iter().collect()
}

/// Clipped surrogate with entropy bonus, using the actor's current log-probabilities.
pub fn policy_loss(lm: &ToyLm, batch: &RolloutBatch, w: &LossWeights) -> Result<f64> {
    Ok(actor_term(lm, lm, &all(batch), w, ActorTerm::Policy)?.0)
}

/// Exact per-position KL from the actor to the reference, at the visited
/// positions, scaled by `beta_kl`.
pub fn kl_sft_loss(lm: &ToyLm, reference: &ToyLm, batch: &RolloutBatch, w: &LossWeights) -> Result<f64> {
    Ok(actor_term(lm, reference, &all(batch), w, ActorTerm::Kl)?.0)
}

/// Score-function surrogate of the expected reward, each episode's reward
/// centered on the mean reward of the other episodes.
pub fn reward_expectation_loss(lm: &ToyLm, batch: &RolloutBatch) -> Result<f64> {
    let w = LossWeights::default();
    Ok(actor_term(lm, lm, &all(batch), &w, ActorTerm::RewardExpectation)?.0)
}

/// Critic regression loss node for one episode, divided by `transitions`.
pub fn value_loss_var(
    g: &mut Graph,
    critic: &Critic,
    ep: &Episode,
    transitions: usize,
    coef: f64,
) -> Result<Var> {
    let v = critic.response_values_var(g, &ep.input_ids, &ep.response_ids)?;
    let targets: Vec<f64> = ep.transitions.iter().map(|t| t.value_target).collect();
    let t = g.constant(Matrix::column(&targets));
    let d = g.sub(v, t);
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, coef / transitions as f64))
}

pub fn value_loss_grads(critic: &Critic, episodes: &[&Episode], w: &LossWeights) -> Result<(f64, Gradients)> {
    let n = episodes.iter().map(|e| e.transitions.len()).sum::<usize>().max(1);
    let mut grads = Gradients::zeros_like(&critic.net.params);
    let mut value = 0.0;
    for ep in episodes {
        let mut g = Graph::new(&critic.net.params);
        let v = value_loss_var(&mut g, critic, ep, n, w.value_coef)?;
        value += g.scalar(v);
        grads.add(&g.backward(v));
    }
    Ok((value, grads))
}

/// `value_coef * mean (V_pred - (r + V_next))^2` with the critic's current predictions.
pub fn value_loss(critic: &Critic, batch: &RolloutBatch, w: &LossWeights) -> Result<f64> {
    Ok(value_loss_grads(critic, &all(batch), w)?.0)
}

/// Per-token negative log-likelihood node of a general-text sequence, scored from `<bos>`.
fn sequence_nll(g: &mut Graph, lm: &ToyLm, seq: &[u32]) -> Result<Var> {
    let mut input = vec![BOS];
    input.extend_from_slice(&seq[..seq.len() - 1]);
    let lp = lm.log_probs(g, &input)?;
    let cols: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
    let picked = g.pick(lp, &cols);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// Truncates sequences to the context window and drops empty ones.
pub fn fit_pretrain(lm: &ToyLm, sequences: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let ctx = lm.config().context;
    sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s[..s.len().min(ctx)].to_vec())
        .collect()
}

pub fn pretrain_grads(lm: &ToyLm, sequences: &[Vec<u32>], w: &LossWeights) -> Result<(f64, Gradients)> {
    let seqs = fit_pretrain(lm, sequences);
    if seqs.is_empty() {
        return Err(MapoError::InvalidInput("pretrain batch is empty".into()));
    }
    let tokens: usize = seqs.iter().map(Vec::len).sum();
    let mut grads = Gradients::zeros_like(lm.params());
    let mut value = 0.0;
    for s in &seqs {
        let mut g = Graph::new(lm.params());
        let nll = sequence_nll(&mut g, lm, s)?;
        let v = g.scale(nll, w.pretrain_coef / tokens as f64);
        value += g.scalar(v);
        grads.add(&g.backward(v));
    }
    Ok((value, grads))
}

/// `pretrain_coef` times the per-token negative log-likelihood of general text.
pub fn pretrain_loss(lm: &ToyLm, sequences: &[Vec<u32>], w: &LossWeights) -> Result<f64> {
    Ok(pretrain_grads(lm, sequences, w)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TransformerConfig;
    use crate::rl::Transition;
    use crate::tokenizer::{Vocab, EOS};

    fn lm(seed: u64) -> ToyLm {
        let vocab = Vocab::build(["a b c d e f"], 16);
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            context: 16,
            ..Default::default()
        };
        ToyLm::new(vocab, cfg, seed).unwrap()
    }

    fn uniform(mut lm: ToyLm) -> ToyLm {
        let head = lm.params().id_of("lm_head").unwrap();
        let (r, c) = lm.params().get(head).shape();
        *lm.params_mut().get_mut(head) = Matrix::zeros(r, c);
        lm
    }

    fn episode(lm: &ToyLm, prompt_index: usize, response: Vec<u32>, reward: f64) -> Episode {
        let input = vec![5, 6];
        let lp = lm.sequence_logprob(&input, &response).unwrap();
        let n = response.len();
        Episode {
            prompt_index,
            original: "a b".into(),
            input_ids: input,
            transitions: (0..n)
                .map(|t| Transition {
                    token: response[t],
                    behavior_logprob: lp.per_token[t],
                    reference_logprob: lp.per_token[t],
                    value_estimate: 0.0,
                    reward: if t + 1 == n { reward } else { 0.0 },
                    advantage: 0.0,
                    value_target: 0.0,
                })
                .collect(),
            response_text: lm.vocab.decode(&response),
            response_ids: response,
            terminal_reward: reward,
        }
    }

    #[test]
    fn surrogate_anchors() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn unit_ratio_policy_loss_is_negative_mean_advantage() {
        let m = lm(1);
        let mut b = RolloutBatch {
            episodes: vec![episode(&m, 0, vec![7, 8, EOS], 1.0), episode(&m, 1, vec![9, EOS], 0.0)],
            dropped: 0,
        };
        let advs = [0.4, -0.2, 1.0, 0.3, -0.5];
        for (t, a) in b.episodes.iter_mut().flat_map(|e| e.transitions.iter_mut()).zip(advs) {
            t.advantage = a;
        }
        let w = LossWeights {
            entropy_coef: 0.0,
            ..Default::default()
        };
        let mean = advs.iter().sum::<f64>() / 5.0;
        assert!((policy_loss(&m, &b, &w).unwrap() + mean).abs() < 1e-12);

        // zero advantage leaves only the entropy bonus
        for t in b.episodes.iter_mut().flat_map(|e| e.transitions.iter_mut()) {
            t.advantage = 0.0;
        }
        let with_entropy = policy_loss(&m, &b, &LossWeights::default()).unwrap();
        assert!(with_entropy < 0.0);
    }

    #[test]
    fn kl_vanishes_for_identical_policies() {
        let m = lm(1);
        let b = RolloutBatch {
            episodes: vec![episode(&m, 0, vec![7, 8, EOS], 1.0)],
            dropped: 0,
        };
        assert!(kl_sft_loss(&m, &m.clone(), &b, &LossWeights::default()).unwrap().abs() < 1e-15);
        let other = lm(2);
        assert!(kl_sft_loss(&other, &m, &b, &LossWeights::default()).unwrap() > 0.0);
        let off = LossWeights {
            beta_kl: 0.0,
            ..Default::default()
        };
        assert_eq!(kl_sft_loss(&other, &m, &b, &off).unwrap(), 0.0);
    }

    #[test]
    fn two_point_kl_matches_closed_form() {
        // exhaustive expectation of log p - log q under p
        let p = [0.8f64, 0.2];
        let q = [0.5f64, 0.5];
        let sampled: f64 = p.iter().zip(q).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum();
        let closed = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((sampled - closed).abs() < 1e-12);
    }

    #[test]
    fn reward_expectation_anchors() {
        let m = lm(3);
        let lo = episode(&m, 0, vec![7, EOS], 0.0);
        let hi = episode(&m, 1, vec![8, 9, EOS], 1.0);
        let expected = -0.5 * (hi.transitions.iter().map(|t| t.behavior_logprob).sum::<f64>()
            - lo.transitions.iter().map(|t| t.behavior_logprob).sum::<f64>());
        let b = RolloutBatch {
            episodes: vec![lo.clone(), hi],
            dropped: 0,
        };
        assert!((reward_expectation_loss(&m, &b).unwrap() - expected).abs() < 1e-12);
        let same = RolloutBatch {
            episodes: vec![lo.clone(), episode(&m, 1, vec![8, EOS], 0.0)],
            dropped: 0,
        };
        assert_eq!(reward_expectation_loss(&m, &same).unwrap(), 0.0);
    }

    #[test]
    fn composite_arithmetic() {
        let w = LossWeights {
            alpha1: 0.5,
            alpha2: 0.25,
            alpha3: 0.25,
            beta1: 1.0,
            beta2: 2.0,
            beta3: 3.0,
            gamma1: 0.6,
            gamma2: 0.3,
            gamma3: 0.1,
            ..Default::default()
        };
        assert!((combined_policy_loss(&w, 2.0, 4.0, 8.0) - 4.0).abs() < 1e-12);
        assert!((sft_approx_loss(&w, 0.1, 0.2, 0.3) - 1.4).abs() < 1e-12);
        assert!((joint_loss(&w, 1.0, 2.0, 3.0) - 1.5).abs() < 1e-12);
        let zero = LossWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            ..w
        };
        assert_eq!(combined_policy_loss(&zero, 2.0, 4.0, 8.0), 0.0);
    }

    #[test]
    fn rank_and_normalized_logprob_anchors() {
        let w = LossWeights::default();
        assert!((rank_hinge(&[-0.5, -1.0], &[0.2, 0.9], &w) - 0.5).abs() < 1e-12);
        assert_eq!(rank_hinge(&[-1.0, -0.5], &[0.2, 0.9], &w), 0.0);
        assert_eq!(rank_hinge(&[-0.1, -3.0, -2.0], &[0.5, 0.5, 0.5], &w), 0.0);
        let shifted = rank_hinge(&[0.5, 0.0], &[0.2, 0.9], &w);
        assert!((shifted - 0.5).abs() < 1e-12);

        let u = uniform(lm(1));
        let v = u.vocab_size() as f64;
        let p = rrmf_normalized_logprob(&u, &[5], &[7, 8, 9, EOS]).unwrap();
        assert!((p + v.ln()).abs() < 1e-12);
        let ce = rrmf_best_ce_loss(&u, &[5], &[7, 8, EOS]).unwrap();
        assert!((ce - 3.0 * v.ln()).abs() < 1e-12);
        assert!(rrmf_normalized_logprob(&u, &[5], &[]).is_err());
    }

    #[test]
    fn value_and_pretrain_anchors() {
        assert!((value_loss_from(&[0.2], &[1.0], 0.5) - 0.32).abs() < 1e-12);
        assert_eq!(value_loss_from(&[0.3, 0.1], &[0.3, 0.1], 0.5), 0.0);
        assert!((value_loss_from(&[0.2], &[1.0], 1.0) - 2.0 * value_loss_from(&[0.2], &[1.0], 0.5)).abs() < 1e-12);

        let u = uniform(lm(1));
        let v = u.vocab_size() as f64;
        let w = LossWeights {
            pretrain_coef: 0.7,
            ..Default::default()
        };
        let l = pretrain_loss(&u, &[vec![5, 6, 7, 8, 9]], &w).unwrap();
        assert!((l - 0.7 * 5.0 * v.ln() / 5.0).abs() < 1e-12);
        let off = LossWeights {
            pretrain_coef: 0.0,
            ..Default::default()
        };
        assert_eq!(pretrain_loss(&u, &[vec![5, 6]], &off).unwrap(), 0.0);
    }

    #[test]
    fn group_terms_sum_to_batch_values() {
        let m = lm(5);
        let eps = [
            episode(&m, 0, vec![7, EOS], 0.1),
            episode(&m, 0, vec![8, 9, EOS], 0.7),
            episode(&m, 1, vec![9, EOS], 0.4),
        ];
        let refs: Vec<&Episode> = eps.iter().collect();
        let w = LossWeights::default();
        let (rank, _) = actor_term(&m, &m, &refs, &w, ActorTerm::Rank).unwrap();
        let p0 = rrmf_normalized_logprob(&m, &[5, 6], &[7, EOS]).unwrap();
        let p1 = rrmf_normalized_logprob(&m, &[5, 6], &[8, 9, EOS]).unwrap();
        let expected = rank_hinge(&[p0, p1], &[0.1, 0.7], &w) / 2.0;
        assert!((rank - expected).abs() < 1e-12);
        let (ft, _) = actor_term(&m, &m, &refs, &w, ActorTerm::BestCrossEntropy).unwrap();
        let ce = rrmf_best_ce_loss(&m, &[5, 6], &[8, 9, EOS]).unwrap() + rrmf_best_ce_loss(&m, &[5, 6], &[9, EOS]).unwrap();
        assert!((ft - ce / 2.0).abs() < 1e-12);
    }
}
