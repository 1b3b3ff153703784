//! `mapo`: run the prompt-optimization pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapo_core::pipeline::{self, PipelineConfig, StageOptions};
use mapo_core::TaskKind;

#[derive(Debug, Parser)]
#[command(name = "mapo", version, about = "Model-adaptive prompt optimization")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "mapo.toml")]
    config: PathBuf,
    /// Base seed; replaces every per-stage seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun a stage that already completed.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the warm-up dataset from the input prompts.
    Warmup,
    /// Fine-tune the rewriter on the warm-up pairs.
    Sft,
    /// Train the reward model on the ranking pairs.
    Reward,
    /// Refine the rewriter with reinforcement learning.
    Rl,
    /// Rewrite one prompt and print it.
    Optimize {
        #[arg(long)]
        prompt: String,
        /// One of: generation, qa, classification.
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// Model directory to use instead of the run's latest checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score original, SFT and RL prompts and write report CSVs.
    Eval,
    /// Run every stage in order.
    All,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task `{s}` (expected generation, qa or classification)"))
}

fn load_config(cli: &Cli) -> mapo_core::Result<PipelineConfig> {
    let mut config = if cli.config.exists() {
        PipelineConfig::load(&cli.config)?
    } else {
        log::warn!("{} not found; using defaults", cli.config.display());
        PipelineConfig::default()
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(dir) = &cli.run_dir {
        config.paths.run_dir = dir.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> mapo_core::Result<()> {
    let config = load_config(cli)?;
    let options = StageOptions { force: cli.force };
    let report = |r: pipeline::StageRecord| {
        for (k, v) in &r.summary {
            println!("{k}: {v}");
        }
    };
    match &cli.command {
        Command::Warmup => report(pipeline::cmd_warmup(&config, options)?),
        Command::Sft => report(pipeline::cmd_sft(&config, options)?),
        Command::Reward => report(pipeline::cmd_reward(&config, options)?),
        Command::Rl => report(pipeline::cmd_rl(&config, options)?),
        Command::Eval => report(pipeline::cmd_eval(&config, options)?),
        Command::All => {
            for r in pipeline::run_all(&config, options)? {
                report(r);
            }
        }
        Command::Optimize {
            prompt,
            task,
            checkpoint,
        } => println!("{}", pipeline::cmd_optimize(&config, prompt, *task, checkpoint.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
