//! Orchestration of the full run: configuration, run manifest and one
//! command per stage (warm-up, SFT, reward, RL, optimize, eval).
//!
//! Run directory layout:
//!
//! ```text
//! <run_dir>/manifest.json
//! <run_dir>/warmup/{train,val,test}.jsonl, ranking_pairs.jsonl
//! <run_dir>/sft/epoch_<n>/, sft/final/, sft/training_log.json
//! <run_dir>/reward/  (model, training_log.json)
//! <run_dir>/rl/metrics.jsonl, rl/step_<n>/, rl/final/, rl/critic/
//! <run_dir>/eval/report_<method>.csv, raw_scores_<method>.csv, improvement.csv, summary.json
//! ```

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{EndpointConfig, EvalConfig, ModelConfig, PipelineConfig, PretrainConfig, StageSeeds};
pub use manifest::{RunManifest, Stage, StageRecord};
pub use stages::{
    cmd_eval, cmd_optimize, cmd_reward, cmd_rl, cmd_sft, cmd_warmup, read_eval_summary, run_all, EvalSummary,
    StageOptions,
};
