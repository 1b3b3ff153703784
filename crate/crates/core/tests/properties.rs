mod common;

use common::oracle;
use mapo_core::eval::{compare_runs, paired_t_test, quantile_sorted, ImprovementRow, MetricReport};
use mapo_core::metrics::{levenshtein, normalized_edit_distance, rouge_l, token_f1};
use mapo_core::reward::ranking_loss_from_margins;
use mapo_core::rl::{compute_advantages, Episode, LossWeights, RolloutBatch, Transition};
use mapo_core::tokenizer::Vocab;
use mapo_core::TokenizedText;
use proptest::prelude::*;

fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..=max)
}

fn text(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!['a', 'b', 'c', ' ']), 0..=max).prop_map(|v| v.into_iter().collect())
}

fn episode(rewards: Vec<f64>, values: Vec<f64>) -> RolloutBatch {
    let transitions = rewards
        .iter()
        .zip(&values)
        .map(|(&reward, &value_estimate)| Transition {
            token: 4,
            behavior_logprob: -1.0,
            reference_logprob: -1.0,
            value_estimate,
            reward,
            advantage: 0.0,
            value_target: 0.0,
        })
        .collect();
    RolloutBatch {
        episodes: vec![Episode {
            prompt_index: 0,
            original: String::new(),
            input_ids: vec![],
            response_ids: vec![4; rewards.len()],
            response_text: String::new(),
            transitions,
            terminal_reward: *rewards.last().unwrap_or(&0.0),
        }],
        dropped: 0,
    }
}

proptest! {
    #[test]
    fn rouge_and_f1_match_oracles(a in words(10), b in words(10)) {
        let (ta, tb) = (TokenizedText::from_tokens(a.clone()), TokenizedText::from_tokens(b.clone()));
        prop_assert!((rouge_l(&ta, &tb).value() - oracle::rouge_l(&a, &b)).abs() < 1e-12);
        prop_assert!((token_f1(&ta, &tb).value() - oracle::token_f1(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded_and_reflexive(a in words(12)) {
        let t = TokenizedText::from_tokens(a.clone());
        let expected = if a.is_empty() { 0.0 } else { 1.0 };
        prop_assert_eq!(rouge_l(&t, &t).value(), expected);
        prop_assert_eq!(token_f1(&t, &t).value(), expected);
    }

    #[test]
    fn token_f1_is_symmetric(a in words(12), b in words(12)) {
        let (ta, tb) = (TokenizedText::from_tokens(a), TokenizedText::from_tokens(b));
        prop_assert!((token_f1(&ta, &tb).value() - token_f1(&tb, &ta).value()).abs() < 1e-12);
    }

    #[test]
    fn levenshtein_matches_recursion(a in text(7), b in text(7)) {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(levenshtein(&a, &b), oracle::levenshtein(&ca, &cb));
    }

    #[test]
    fn edit_distance_is_a_bounded_metric(a in text(16), b in text(16), c in text(16)) {
        let d = |x: &str, y: &str| normalized_edit_distance(x, y).value();
        prop_assert!((0.0..=1.0).contains(&d(&a, &b)));
        prop_assert_eq!(d(&a, &b) == 0.0, a == b);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn ranking_loss_decreases_in_margin(m in -20.0f64..20.0, dm in 1e-3f64..5.0, k in 2usize..6) {
        prop_assert!(ranking_loss_from_margins(&[m + dm], k) < ranking_loss_from_margins(&[m], k));
        prop_assert!(ranking_loss_from_margins(&[m], k) > 0.0);
    }

    #[test]
    fn gae_with_unit_lambda_is_discounted_return_minus_value(
        steps in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..8)
    ) {
        let (rewards, values): (Vec<f64>, Vec<f64>) = steps.into_iter().unzip();
        let w = LossWeights { gae_lambda: 1.0, ..LossWeights::default() };
        let mut batch = episode(rewards.clone(), values.clone());
        compute_advantages(&mut batch, &w);
        for (t, tr) in batch.episodes[0].transitions.iter().enumerate() {
            let ret: f64 = rewards[t..].iter().enumerate().map(|(i, r)| w.discount_gamma.powi(i as i32) * r).sum();
            prop_assert!((tr.advantage - (ret - values[t])).abs() < 1e-9);
        }
    }

    #[test]
    fn quantiles_are_ordered(mut xs in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let report = MetricReport::from_scores("d", mapo_core::TaskKind::Generation, xs.clone(), 0).unwrap();
        let q = report.quantiles;
        prop_assert!(q.p10 <= q.p25 && q.p25 <= report.median && report.median <= q.p75 && q.p75 <= q.p90);
        xs.sort_by(f64::total_cmp);
        prop_assert_eq!(quantile_sorted(&xs, 0.0), xs[0]);
        prop_assert_eq!(quantile_sorted(&xs, 1.0), *xs.last().unwrap());
    }

    #[test]
    fn vocab_round_trips_known_words(ws in prop::collection::vec(prop::sample::select(vec!["rain", "river", "the", "city"]), 0..10)) {
        let text = ws.join(" ");
        let v = Vocab::build([text.as_str(), "rain river the city"], 64);
        prop_assert_eq!(v.decode(&v.encode(&text)), text);
    }

    #[test]
    fn relative_change_is_defined_iff_baseline_nonzero(base in prop_oneof![Just(0.0), 0.0f64..1.0], treat in 0.0f64..1.0) {
        let row = ImprovementRow::new("d", base, treat);
        prop_assert_eq!(row.is_relative_undefined(), base == 0.0);
        prop_assert!((row.absolute_delta - (treat - base)).abs() < 1e-12);
    }
}

#[test]
fn zero_baseline_is_flagged() {
    let base = MetricReport::from_scores("d", mapo_core::TaskKind::Generation, vec![0.0, 0.0], 0).unwrap();
    let treat = MetricReport::from_scores("d", mapo_core::TaskKind::Generation, vec![0.5, 0.5], 0).unwrap();
    let row = compare_runs(&base, &treat).unwrap();
    assert!(row.is_relative_undefined());
    assert_eq!(row.relative_pct, None);
}

#[test]
fn t_test_detects_consistent_shift() {
    let a = [0.1, 0.2, 0.3, 0.25, 0.15];
    let b: Vec<f64> = a.iter().zip([0.51, 0.49, 0.5, 0.52, 0.48]).map(|(x, d)| x + d).collect();
    let t = paired_t_test(&a, &b).unwrap();
    assert!(t.p_value < 1e-4 && t.mean_difference > 0.4);
}
