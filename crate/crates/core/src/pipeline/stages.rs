//! Stage commands. Each one checks the manifest, writes into its own
//! directory under the run directory, and records output digests only after
//! every output is on disk. A failing stage leaves no outputs behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::manifest::{digest_tree, file_digest, RunManifest, Stage, StageRecord};
use crate::error::{MapoError, Result};
use crate::eval::{
    compare_runs, default_stoplist, evaluate_prompts, mean_normalized_edit_distance, paired_t_test,
    word_frequency_report, write_improvement_csv, write_raw_scores_csv, write_report_csv, EvalRecord, ImprovementRow,
    MetricReport, PairedTTest, PolicySummaryPair, WordFrequencyReport,
};
use crate::fixtures::GeneralText;
use crate::lm::transformer::MAX_VOCAB;
use crate::lm::{PolicyHandle, PolicyRole, ToyLm};
use crate::metrics::{Score, TaskKind};
use crate::reward::{bottom_anchors, calibrate_bias, read_pairs, save_with_log, train_reward, write_pairs, RankingPairBatch, RewardModel};
use crate::rl::{optimize_prompt, summarize_policy, train_rl, RlModels, RlPrompt};
use crate::rng;
use crate::sft::{format_sft_example, train_sft, CLASSIFICATION_PREFIX, GENERATIVE_PREFIX, QA_PREFIX};
use crate::tokenizer::Vocab;
use crate::warmup::{build_for_prompt, load_warmup_dataset, read_jsonl, write_jsonl, PromptPair, PromptRecord, WarmupRecord};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const RANKING_PAIRS_FILE: &str = "ranking_pairs.jsonl";
pub const FINAL_DIR: &str = "final";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Rerun a stage that already completed.
    pub force: bool,
}

type Summary = BTreeMap<String, f64>;
type Inputs = BTreeMap<String, String>;

fn run_stage(
    config: &PipelineConfig,
    stage: Stage,
    seed: u64,
    options: StageOptions,
    body: impl FnOnce(&Path) -> Result<(Inputs, Summary)>,
) -> Result<StageRecord> {
    let run_dir = &config.paths.run_dir;
    let mut manifest = RunManifest::load_or_new(run_dir, &config.digest())?;
    if manifest.is_complete(stage) && !options.force {
        return Err(MapoError::StageCompleted(stage.name().into()));
    }
    manifest.require_upstream(stage, run_dir)?;
    manifest.invalidate_from(stage);
    manifest.save(run_dir)?;
    let dir = stage.dir(run_dir);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let (inputs, summary) = match body(&dir) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&dir);
            return Err(e);
        }
    };
    let record = StageRecord {
        completed_at: chrono::Utc::now().to_rfc3339(),
        seed,
        inputs,
        outputs: digest_tree(run_dir, &dir)?,
        summary,
    };
    manifest.stages.insert(stage, record.clone());
    manifest.save(run_dir)?;
    log::info!("stage {} complete", stage.name());
    Ok(record)
}

fn input_digest(path: &Path) -> Result<(String, String)> {
    Ok((path.display().to_string(), file_digest(path)?))
}

fn warmup_split(config: &PipelineConfig, file: &str) -> Result<Vec<WarmupRecord>> {
    load_warmup_dataset(&Stage::Warmup.dir(&config.paths.run_dir).join(file))
}

fn all_warmup_records(config: &PipelineConfig) -> Result<Vec<WarmupRecord>> {
    let mut all = Vec::new();
    for f in [TRAIN_FILE, VAL_FILE, TEST_FILE] {
        all.extend(warmup_split(config, f)?);
    }
    Ok(all)
}

fn load_general(config: &PipelineConfig) -> Result<Vec<GeneralText>> {
    match &config.paths.general {
        Some(p) => read_jsonl(p),
        None => Ok(Vec::new()),
    }
}

/// Builds the warm-up dataset: candidates from the oracle, scores from the
/// target, one optimized prompt and ranking sequence per input record.
pub fn cmd_warmup(config: &PipelineConfig, options: StageOptions) -> Result<StageRecord> {
    let seed = config.seeds.warmup;
    run_stage(config, Stage::Warmup, seed, options, |dir| {
        let prompts_path = &config.paths.prompts;
        let prompts: Vec<PromptRecord> = read_jsonl(prompts_path)?;
        let oracle = config.endpoints.oracle.handle(PolicyRole::Oracle)?;
        let target = config.endpoints.target.handle(PolicyRole::TargetLlm)?;
        let mut wc = config.warmup.clone();
        wc.generation = wc.generation.with_seed(seed);
        let mut records = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let (pair, seq) = build_for_prompt(&oracle, &target, p, &wc)?;
            log::debug!("warmup record {i}: {:.3} -> {:.3}", pair.score_original.value(), pair.score_optimized.value());
            records.push(WarmupRecord::new(&pair, &seq));
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng::rng_for(seed, &["split"]));
        let (n_train, n_val, _) = wc.split.counts(records.len());
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>()
        };
        let train = pick(&order[..n_train]);
        let val = pick(&order[n_train..n_train + n_val]);
        let test = pick(&order[n_train + n_val..]);
        write_jsonl(&dir.join(TRAIN_FILE), &train)?;
        write_jsonl(&dir.join(VAL_FILE), &val)?;
        write_jsonl(&dir.join(TEST_FILE), &test)?;
        let mut batches = Vec::new();
        for r in &train {
            if let Some(b) = RankingPairBatch::from_record(r)? {
                batches.push(b);
            }
        }
        let n_pairs = write_pairs(&dir.join(RANKING_PAIRS_FILE), &batches)?;

        let pairs: Vec<PromptPair> = records.iter().map(WarmupRecord::pair).collect();
        let mut summary = Summary::new();
        summary.insert("records".into(), records.len() as f64);
        summary.insert("train".into(), train.len() as f64);
        summary.insert("val".into(), val.len() as f64);
        summary.insert("test".into(), test.len() as f64);
        summary.insert("ranking_pairs".into(), n_pairs as f64);
        summary.insert(
            "improved".into(),
            records.iter().filter(|r| r.score_optimized > r.score_original).count() as f64,
        );
        if !pairs.is_empty() {
            summary.insert("mean_edit_distance".into(), mean_normalized_edit_distance(&pairs)?);
        }
        Ok((Inputs::from([input_digest(prompts_path)?]), summary))
    })
}

/// Vocabulary over every prompt text the pipeline can see, the task
/// prefixes and the general-task corpus.
pub fn build_vocab(records: &[WarmupRecord], general: &[GeneralText]) -> Vocab {
    let mut corpus: Vec<&str> = vec![GENERATIVE_PREFIX, QA_PREFIX, CLASSIFICATION_PREFIX];
    for r in records {
        corpus.push(&r.original);
        corpus.push(&r.optimized);
        corpus.extend(r.candidates.iter().map(|c| c.text.as_str()));
    }
    corpus.extend(general.iter().map(|g| g.text.as_str()));
    Vocab::build(corpus, MAX_VOCAB)
}

/// Fine-tunes a fresh toy model on the training pairs.
pub fn cmd_sft(config: &PipelineConfig, options: StageOptions) -> Result<StageRecord> {
    let seed = config.seeds.sft;
    run_stage(config, Stage::Sft, seed, options, |dir| {
        let train = warmup_split(config, TRAIN_FILE)?;
        if train.is_empty() {
            return Err(MapoError::InvalidInput("the warm-up training split is empty".into()));
        }
        let vocab = build_vocab(&all_warmup_records(config)?, &load_general(config)?);
        let lm = ToyLm::new(vocab.clone(), config.model.transformer(vocab.len()), seed)?;
        let examples = train
            .iter()
            .map(|r| format_sft_example(&r.pair()))
            .collect::<Result<Vec<_>>>()?;
        let mut handle = PolicyHandle::actor(lm);
        let sft_config = crate::sft::SftConfig { seed, ..config.sft };
        let log = train_sft(&mut handle, &examples, &sft_config, Some(dir))?;
        let lm = handle.toy().expect("actor is a toy model");
        lm.save(&dir.join(FINAL_DIR))?;
        fs::write(dir.join("training_log.json"), serde_json::to_vec_pretty(&log.epochs)?)?;
        let summary = Summary::from([
            ("examples".into(), examples.len() as f64),
            ("skipped".into(), log.skipped as f64),
            ("initial_loss".into(), log.initial_loss),
            ("final_loss".into(), log.final_loss()),
            ("vocab_size".into(), vocab.len() as f64),
        ]);
        Ok((Inputs::new(), summary))
    })
}

fn ranking_batches(records: &[WarmupRecord]) -> Result<Vec<RankingPairBatch>> {
    let mut out = Vec::new();
    for r in records {
        if let Some(b) = RankingPairBatch::from_record(r)? {
            out.push(b);
        }
    }
    Ok(out)
}

/// Trains the reward model from the SFT backbone on the ranking pairs.
pub fn cmd_reward(config: &PipelineConfig, options: StageOptions) -> Result<StageRecord> {
    let seed = config.seeds.reward;
    run_stage(config, Stage::Reward, seed, options, |dir| {
        let run_dir = &config.paths.run_dir;
        let sft = ToyLm::load(&Stage::Sft.dir(run_dir).join(FINAL_DIR))?;
        let train = read_pairs(&Stage::Warmup.dir(run_dir).join(RANKING_PAIRS_FILE))?;
        if train.is_empty() {
            return Err(MapoError::InvalidInput("no ranking pairs in the warm-up data".into()));
        }
        let heldout = ranking_batches(&warmup_split(config, VAL_FILE)?)?;
        let mut rm = RewardModel::from_lm(&sft);
        let reward_config = crate::sft::SftConfig { seed, ..config.reward };
        let log = train_reward(&mut rm, &train, &heldout, &reward_config)?;
        let bias = calibrate_bias(&mut rm, &bottom_anchors(&warmup_split(config, TRAIN_FILE)?))?;
        save_with_log(&rm, &log, dir)?;
        let mut summary = Summary::from([
            ("train_sequences".into(), train.len() as f64),
            ("heldout_sequences".into(), heldout.len() as f64),
            ("bias".into(), bias),
        ]);
        if let Some(last) = log.last() {
            summary.insert("final_loss".into(), last.loss);
            if let Some(acc) = last.heldout_accuracy {
                summary.insert("heldout_accuracy".into(), acc);
            }
        }
        Ok((Inputs::new(), summary))
    })
}

fn rl_prompts(records: &[WarmupRecord]) -> Vec<RlPrompt> {
    records
        .iter()
        .map(|r| RlPrompt {
            task: r.task,
            original: r.original.clone(),
        })
        .collect()
}

/// Samples the configured share of the general corpus (at least one text)
/// and encodes the texts that fit the context window.
pub fn pretrain_sample(config: &PipelineConfig, lm: &ToyLm, general: &[GeneralText], seed: u64) -> Vec<Vec<u32>> {
    if general.is_empty() {
        return Vec::new();
    }
    let n = ((general.len() as f64 * config.pretrain.sample_fraction).ceil() as usize).clamp(1, general.len());
    let mut chosen: Vec<&GeneralText> = general
        .choose_multiple(&mut rng::rng_for(seed, &["pretrain-sample"]), n)
        .collect();
    chosen.sort_by(|a, b| a.text.cmp(&b.text));
    chosen
        .into_iter()
        .map(|g| lm.vocab.encode(&g.text))
        .filter(|ids| !ids.is_empty() && ids.len() < lm.config().context)
        .collect()
}

/// PPO/RRMF refinement of the SFT model against the frozen reward model.
pub fn cmd_rl(config: &PipelineConfig, options: StageOptions) -> Result<StageRecord> {
    let seed = config.seeds.rl;
    run_stage(config, Stage::Rl, seed, options, |dir| {
        let run_dir = &config.paths.run_dir;
        let sft = ToyLm::load(&Stage::Sft.dir(run_dir).join(FINAL_DIR))?;
        let rm = RewardModel::load(&Stage::Reward.dir(run_dir))?;
        let prompts = rl_prompts(&warmup_split(config, TRAIN_FILE)?);
        let general = load_general(config)?;
        let pretrain = pretrain_sample(config, &sft, &general, seed);
        let mut inputs = Inputs::new();
        if let Some(p) = &config.paths.general {
            inputs.extend([input_digest(p)?]);
        }
        let mut models = RlModels::new(sft, rm)?;
        let rl_config = crate::rl::RlConfig { seed, ..config.rl };
        let log = train_rl(&mut models, &prompts, &pretrain, &rl_config, Some(dir))?;
        models.actor.toy().expect("actor is a toy model").save(&dir.join(FINAL_DIR))?;
        models.critic.save(&dir.join("critic"))?;
        let mut summary = Summary::from([
            ("steps".into(), log.len() as f64),
            ("prompts".into(), prompts.len() as f64),
            ("pretrain_texts".into(), pretrain.len() as f64),
        ]);
        if let Some(last) = log.last() {
            summary.insert("final_mean_reward".into(), last.mean_reward);
            summary.insert("final_kl_per_token".into(), last.kl_per_token);
        }
        Ok((inputs, summary))
    })
}

/// Checkpoint used for inference: an explicit directory, else the RL
/// result, else the SFT result.
pub fn resolve_checkpoint(config: &PipelineConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return if p.join("model.json").exists() {
            Ok(p.to_path_buf())
        } else {
            Err(MapoError::MissingCheckpoint(p.to_path_buf()))
        };
    }
    let run_dir = &config.paths.run_dir;
    for stage in [Stage::Rl, Stage::Sft] {
        let p = stage.dir(run_dir).join(FINAL_DIR);
        if p.join("model.json").exists() {
            return Ok(p);
        }
    }
    Err(MapoError::MissingCheckpoint(Stage::Rl.dir(run_dir).join(FINAL_DIR)))
}

/// Rewrites one prompt with the trained optimizer.
pub fn cmd_optimize(config: &PipelineConfig, prompt: &str, task: TaskKind, checkpoint: Option<&Path>) -> Result<String> {
    let dir = resolve_checkpoint(config, checkpoint)?;
    let actor = PolicyHandle::actor(ToyLm::load(&dir)?);
    optimize_prompt(&actor, task, prompt, &config.eval.generation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: usize,
    pub policy: PolicySummaryPair,
    pub mean_edit_distance_sft: f64,
    pub mean_edit_distance_rl: f64,
    pub word_frequencies: WordFrequencyReport,
    /// RL prompts vs original prompts, per dataset.
    pub t_tests: BTreeMap<String, PairedTTest>,
}

pub const METHODS: [&str; 3] = ["original", "sft", "rl"];

/// Scores original, SFT-rewritten and RL-rewritten prompts on the target and
/// writes report, raw-score and improvement CSVs plus a JSON summary.
pub fn cmd_eval(config: &PipelineConfig, options: StageOptions) -> Result<StageRecord> {
    let seed = config.seeds.eval;
    run_stage(config, Stage::Eval, seed, options, |dir| {
        let run_dir = &config.paths.run_dir;
        let all = all_warmup_records(config)?;
        let mut records = warmup_split(config, TEST_FILE)?;
        if records.is_empty() {
            log::warn!("test split is empty; evaluating on every warm-up record");
            records = all.clone();
        }
        if records.is_empty() {
            return Err(MapoError::InvalidInput("no records to evaluate".into()));
        }
        let sft = ToyLm::load(&Stage::Sft.dir(run_dir).join(FINAL_DIR))?;
        let rl = ToyLm::load(&Stage::Rl.dir(run_dir).join(FINAL_DIR))?;
        let rm = RewardModel::load(&Stage::Reward.dir(run_dir))?;
        let target = config.endpoints.target.handle(PolicyRole::TargetLlm)?;
        let gen = config.eval.generation.with_seed(seed);
        let sft_handle = PolicyHandle::actor(sft.clone());
        let rl_handle = PolicyHandle::actor(rl.clone());

        let mut by_dataset: BTreeMap<(String, TaskKind), Vec<&WarmupRecord>> = BTreeMap::new();
        for r in &records {
            by_dataset.entry((r.dataset.clone(), r.task)).or_default().push(r);
        }
        let mut reports: BTreeMap<&str, Vec<MetricReport>> = BTreeMap::new();
        let mut rewrites: BTreeMap<&str, Vec<PromptPair>> = BTreeMap::new();
        let mut improvements: Vec<(String, ImprovementRow)> = Vec::new();
        let mut t_tests = BTreeMap::new();
        for ((dataset, task), group) in &by_dataset {
            let mut per_method = Vec::new();
            for method in METHODS {
                let mut eval_records = Vec::with_capacity(group.len());
                for r in group {
                    let prompt = match method {
                        "original" => r.original.clone(),
                        "sft" => optimize_prompt(&sft_handle, *task, &r.original, &gen)?,
                        _ => optimize_prompt(&rl_handle, *task, &r.original, &gen)?,
                    };
                    if method != "original" {
                        rewrites.entry(method).or_default().push(PromptPair {
                            original: r.original.clone(),
                            optimized: prompt.clone(),
                            task: *task,
                            dataset_name: dataset.clone(),
                            reference_output: r.reference.clone(),
                            score_original: Score::ZERO,
                            score_optimized: Score::ZERO,
                        });
                    }
                    eval_records.push(EvalRecord {
                        prompt,
                        reference: r.reference.clone(),
                    });
                }
                let report = evaluate_prompts(&target, dataset, &eval_records, *task, &gen)?;
                reports.entry(method).or_default().push(report.clone());
                per_method.push(report);
            }
            for (i, method) in ["sft", "rl"].iter().enumerate() {
                improvements.push((method.to_string(), compare_runs(&per_method[0], &per_method[i + 1])?));
            }
            if group.len() >= 2 {
                t_tests.insert(dataset.clone(), paired_t_test(&per_method[0].scores, &per_method[2].scores)?);
            }
        }
        for method in METHODS {
            let rs = &reports[method];
            write_report_csv(&dir.join(format!("report_{method}.csv")), rs)?;
            write_raw_scores_csv(&dir.join(format!("raw_scores_{method}.csv")), rs)?;
        }
        write_improvement_csv(&dir.join("improvement.csv"), &improvements)?;

        let prompts = rl_prompts(&all);
        let sampling = config.eval.sampling.with_seed(seed);
        let n = config.eval.samples_per_prompt;
        let policy = PolicySummaryPair {
            sft: summarize_policy(&sft, &sft, &rm, &prompts, n, &sampling)?,
            rl: summarize_policy(&rl, &sft, &rm, &prompts, n, &sampling)?,
        };
        let stoplist: BTreeSet<String> = default_stoplist();
        let rl_rewrites = &rewrites["rl"];
        let originals: Vec<String> = rl_rewrites.iter().map(|p| p.original.clone()).collect();
        let optimized: Vec<String> = rl_rewrites.iter().map(|p| p.optimized.clone()).collect();
        let summary = EvalSummary {
            records: records.len(),
            policy,
            mean_edit_distance_sft: mean_normalized_edit_distance(&rewrites["sft"])?,
            mean_edit_distance_rl: mean_normalized_edit_distance(rl_rewrites)?,
            word_frequencies: word_frequency_report(&originals, &optimized, &stoplist, config.eval.top_k_words)?,
            t_tests,
        };
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
        let mut out = Summary::from([
            ("records".into(), records.len() as f64),
            ("reward_sft".into(), policy.sft.mean_reward),
            ("reward_rl".into(), policy.rl.mean_reward),
            ("kl_rl_to_sft".into(), policy.rl.kl_per_token),
        ]);
        for r in &reports["original"] {
            out.insert(format!("original_mean/{}", r.dataset_name), r.mean);
        }
        Ok((Inputs::new(), out))
    })
}

/// Runs every stage in order.
pub fn run_all(config: &PipelineConfig, options: StageOptions) -> Result<Vec<StageRecord>> {
    Ok(vec![
        cmd_warmup(config, options)?,
        cmd_sft(config, options)?,
        cmd_reward(config, options)?,
        cmd_rl(config, options)?,
        cmd_eval(config, options)?,
    ])
}

pub fn read_eval_summary(config: &PipelineConfig) -> Result<EvalSummary> {
    Ok(serde_json::from_slice(&fs::read(
        Stage::Eval.dir(&config.paths.run_dir).join("summary.json"),
    )?)?)
}
