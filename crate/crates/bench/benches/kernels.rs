use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mapo_core::autograd::Graph;
use mapo_core::fixtures::{toy_prompts, toy_vocab};
use mapo_core::lm::{GenerationParams, TransformerConfig};
use mapo_core::metrics::{levenshtein, rouge_l, token_f1};
use mapo_core::reward::{ranking_loss_var, RankingPairBatch, RewardModel};
use mapo_core::sft::{encode_examples, example_loss, rewriter_input, SftExample};
use mapo_core::params::Gradients;
use mapo_core::{TaskKind, TokenizedText, ToyLm};

fn toy_lm() -> ToyLm {
    let vocab = toy_vocab([]);
    let config = TransformerConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        context: 64,
    };
    ToyLm::new(vocab, config, 1).expect("toy model")
}

fn metrics(c: &mut Criterion) {
    let a = TokenizedText::new("write a short summary of the text about rain storm river and the city bridge");
    let b = TokenizedText::new("produce a concise synopsis of the passage regarding rain river storm near the bridge");
    c.bench_function("rouge_l", |bench| bench.iter(|| rouge_l(black_box(&a), black_box(&b))));
    c.bench_function("token_f1", |bench| bench.iter(|| token_f1(black_box(&a), black_box(&b))));
    let (s, t) = ("classify the topic of this headline : vote mayor", "categorize the theme of this title : vote mayor");
    c.bench_function("levenshtein", |bench| bench.iter(|| levenshtein(black_box(s), black_box(t))));
}

fn model(c: &mut Criterion) {
    let lm = toy_lm();
    let prompt = toy_prompts(1, 3).remove(0);
    let example = SftExample {
        input_text: rewriter_input(prompt.task, &prompt.prompt),
        target_text: format!("please {}", prompt.prompt),
        task: prompt.task,
    };
    let (encoded, _) = encode_examples(&lm, &[example]);
    c.bench_function("sft_loss_and_backward", |bench| {
        bench.iter(|| {
            let mut g = Gradients::zeros_like(lm.params());
            example_loss(&lm, &encoded[0], 1.0, Some(&mut g)).expect("loss")
        })
    });
    let params = GenerationParams {
        temperature: 1.0,
        max_tokens: 16,
        seed: 5,
    };
    let input = rewriter_input(TaskKind::Generation, &prompt.prompt);
    c.bench_function("sample_16_tokens", |bench| bench.iter(|| lm.generate_text(black_box(&input), &params).expect("sample")));

    let rm = RewardModel::from_lm(&lm);
    let batch = RankingPairBatch {
        x: prompt.prompt.clone(),
        items: vec![
            (format!("please {}", prompt.prompt), prompt.prompt.clone()),
            (format!("provide {}", prompt.prompt), prompt.prompt.clone()),
        ],
        k: 3,
    };
    c.bench_function("ranking_loss_and_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(&rm.net.params);
            let v = ranking_loss_var(&rm, &mut g, &batch).expect("loss");
            g.backward(v)
        })
    });
}

criterion_group!(benches, metrics, model);
criterion_main!(benches);
