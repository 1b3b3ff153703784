//! Shared helpers for the integration tests: a small model world and a
//! central finite-difference gradient checker.

#![allow(dead_code)]

pub mod oracle;

use mapo_core::autograd::Graph;
use mapo_core::fixtures::{toy_prompts, toy_vocab};
use mapo_core::lm::{GenerationParams, ToyLm, TransformerConfig};
use mapo_core::params::{Gradients, ParamStore};
use mapo_core::reward::{ranking_loss_var, RankingPairBatch, RewardModel};
use mapo_core::rl::losses::{actor_term, pretrain_grads, value_loss_grads, ActorTerm};
use mapo_core::rl::{collect_rollouts, compute_advantages, Critic, Episode, LossWeights, RlPrompt};
use mapo_core::sft::{encode_examples, example_loss, rewriter_input, SftExample};
use mapo_core::TaskKind;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const COORDINATES: usize = 20;
pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub fn small_lm(seed: u64) -> ToyLm {
    let vocab = toy_vocab([]);
    let cfg = TransformerConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        context: 48,
    };
    ToyLm::new(vocab, cfg, seed).unwrap()
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked == COORDINATES && self.failures == 0
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs())
}

fn agrees(a: f64, n: f64) -> bool {
    (a - n).abs() <= REL_TOL * a.abs().max(n.abs()) + 1e-9
}

/// Compares `analytic` with central differences of `loss` on
/// `COORDINATES` random coordinates that carry a non-zero gradient.
pub fn fd_check<M: Clone>(
    name: &str,
    model: &M,
    params: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &Gradients,
    seed: u64,
) -> GradCheck {
    let mut probe = model.clone();
    let store = params(&mut probe);
    let live: Vec<usize> = (0..store.num_scalars())
        .filter(|&k| {
            let (id, i) = store.locate(k);
            analytic.get(id).data()[i].abs() >= 1e-7
        })
        .collect();
    let mut rng = mapo_core::rng::rng_for(seed, &["fd", name]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut failures = 0;
    for &k in live.choose_multiple(&mut rng, COORDINATES) {
        let (id, i) = params(&mut probe).locate(k);
        let a = analytic.get(id).data()[i];
        let mut plus = model.clone();
        params(&mut plus).get_mut(id).data_mut()[i] += STEP;
        let mut minus = model.clone();
        params(&mut minus).get_mut(id).data_mut()[i] -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_error(a, numeric));
        failures += usize::from(!agrees(a, numeric));
        checked += 1;
    }
    GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
        failures,
    }
}

fn lm_params(m: &mut ToyLm) -> &mut ParamStore {
    m.params_mut()
}

fn rm_params(m: &mut RewardModel) -> &mut ParamStore {
    &mut m.net.params
}

fn critic_params(m: &mut Critic) -> &mut ParamStore {
    &mut m.net.params
}

/// Actor, a distinct reference, reward model, critic and a batch of scored
/// rollouts with non-trivial advantages and importance ratios.
pub struct World {
    pub actor: ToyLm,
    pub reference: ToyLm,
    pub reward: RewardModel,
    pub critic: Critic,
    pub episodes: Vec<Episode>,
}

pub fn world(seed: u64) -> World {
    let actor = small_lm(seed);
    let reference = small_lm(seed + 1);
    let mut reward = RewardModel::from_lm(&small_lm(seed + 2));
    reward.set_bias(0.3);
    let head = reward.net.params.id_of("score_w").expect("score head");
    let mut head_rng = mapo_core::rng::rng_for(seed, &["head"]);
    for v in reward.net.params.get_mut(head).data_mut() {
        *v = head_rng.random_range(-0.5..0.5);
    }
    let critic = Critic::from_reward(&reward);
    let prompts: Vec<RlPrompt> = toy_prompts(2, seed)
        .into_iter()
        .map(|p| RlPrompt {
            task: p.task,
            original: p.prompt,
        })
        .collect();
    let params = GenerationParams {
        temperature: 1.0,
        max_tokens: 6,
        seed,
    };
    let mut batch = collect_rollouts(&actor, &reference, &critic, &reward, &prompts, 3, &params).unwrap();
    let mut rng = mapo_core::rng::rng_for(seed, &["world"]);
    for ep in &mut batch.episodes {
        ep.terminal_reward += rng.random_range(-1.0..1.0);
        if let Some(last) = ep.transitions.last_mut() {
            last.reward = ep.terminal_reward;
        }
        for t in &mut ep.transitions {
            t.behavior_logprob += rng.random_range(-0.1..0.1);
        }
    }
    compute_advantages(&mut batch, &LossWeights::default());
    World {
        actor,
        reference,
        reward,
        critic,
        episodes: batch.episodes,
    }
}

pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    let w = LossWeights {
        entropy_coef: 0.0,
        ..LossWeights::recommended()
    };
    let world = world(seed);
    let eps: Vec<&Episode> = world.episodes.iter().collect();
    let mut out = Vec::new();

    let lm = &world.actor;
    let examples: Vec<SftExample> = toy_prompts(3, seed + 7)
        .into_iter()
        .map(|p| SftExample {
            input_text: rewriter_input(p.task, &p.prompt),
            target_text: format!("please {}", p.prompt),
            task: p.task,
        })
        .collect();
    let (encoded, _) = encode_examples(lm, &examples);
    let sft_loss = |m: &ToyLm| encoded.iter().map(|e| example_loss(m, e, 0.0, None).unwrap()).sum::<f64>();
    let mut g = Gradients::zeros_like(lm.params());
    for e in &encoded {
        example_loss(lm, e, 1.0, Some(&mut g)).unwrap();
    }
    out.push(fd_check("sft cross-entropy", lm, lm_params, sft_loss, &g, seed));

    let batch = RankingPairBatch {
        x: "write a short summary of the text about rain".into(),
        items: vec![
            ("produce a concise synopsis of the passage about rain".into(), "write a short summary of the text about rain".into()),
            ("please write a short summary of the text about rain".into(), "write a summary of the text about rain".into()),
            ("produce a concise synopsis of the passage about rain".into(), "write a summary of the text about rain".into()),
        ],
        k: 3,
    };
    let rank_loss = |m: &RewardModel| {
        let mut g = Graph::new(&m.net.params);
        let v = ranking_loss_var(m, &mut g, &batch).unwrap();
        g.scalar(v)
    };
    let grads = {
        let mut g = Graph::new(&world.reward.net.params);
        let v = ranking_loss_var(&world.reward, &mut g, &batch).unwrap();
        g.backward(v)
    };
    out.push(fd_check("reward ranking loss", &world.reward, rm_params, rank_loss, &grads, seed));

    for (term, name) in [
        (ActorTerm::Policy, "policy gradient"),
        (ActorTerm::Kl, "kl to reference"),
        (ActorTerm::RewardExpectation, "reward expectation"),
        (ActorTerm::Rank, "rank hinge"),
        (ActorTerm::BestCrossEntropy, "best-response cross-entropy"),
    ] {
        let (_, grads) = actor_term(lm, &world.reference, &eps, &w, term).unwrap();
        let f = |m: &ToyLm| actor_term(m, &world.reference, &eps, &w, term).unwrap().0;
        out.push(fd_check(name, lm, lm_params, f, &grads, seed));
    }

    let (_, grads) = value_loss_grads(&world.critic, &eps, &w).unwrap();
    let f = |c: &Critic| value_loss_grads(c, &eps, &w).unwrap().0;
    out.push(fd_check("value loss", &world.critic, critic_params, f, &grads, seed));

    let general: Vec<Vec<u32>> = ["the rain and the river are in the city", "a moon is on the farm with the ship"]
        .iter()
        .map(|t| lm.vocab.encode(t))
        .collect();
    let (_, grads) = pretrain_grads(lm, &general, &w).unwrap();
    let f = |m: &ToyLm| pretrain_grads(m, &general, &w).unwrap().0;
    out.push(fd_check("pretrain likelihood", lm, lm_params, f, &grads, seed));

    let _ = TaskKind::ALL;
    out
}
