//! The single TOML document driving every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MapoError, Result};
use crate::lm::transformer::{MAX_CONTEXT, MAX_EMBED};
use crate::lm::{Backend, GenerationParams, PolicyHandle, PolicyRole, PreferenceTarget, RemoteClient, RemoteConfig, StubParaphraser};
use crate::rl::RlConfig;
use crate::rng;
use crate::sft::SftConfig;
use crate::warmup::WarmupConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub seeds: StageSeeds,
    pub endpoints: EndpointsConfig,
    pub model: ModelConfig,
    pub warmup: WarmupConfig,
    pub sft: SftConfig,
    pub reward: SftConfig,
    pub rl: RlConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            seeds: StageSeeds::default(),
            endpoints: EndpointsConfig::default(),
            model: ModelConfig::default(),
            warmup: WarmupConfig::default(),
            sft: SftConfig::default(),
            reward: SftConfig {
                epochs: 10,
                batch_size: 1,
                gradient_accumulation_steps: 4,
                ..SftConfig::default()
            },
            rl: RlConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
    /// Input prompt records (JSONL).
    pub prompts: PathBuf,
    /// General-task text (JSONL objects with a `text` field) for the pretrain mix.
    pub general: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            prompts: PathBuf::from("prompts.jsonl"),
            general: None,
        }
    }
}

impl PathsConfig {
    /// Makes relative paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        fix(&mut self.prompts);
        if let Some(g) = &mut self.general {
            fix(g);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSeeds {
    pub warmup: u64,
    pub sft: u64,
    pub reward: u64,
    pub rl: u64,
    pub eval: u64,
}

impl Default for StageSeeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

impl StageSeeds {
    /// Per-stage seeds derived from one base seed, kept below 2^63 so they
    /// remain valid TOML integers.
    pub fn from_base(seed: u64) -> Self {
        let s = |label: &str| rng::derive_seed(seed, &["stage", label]) >> 1;
        Self {
            warmup: s("warmup"),
            sft: s("sft"),
            reward: s("reward"),
            rl: s("rl"),
            eval: s("eval"),
        }
    }
}

/// Where a frozen external model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EndpointConfig {
    StubParaphraser(StubParaphraser),
    StubTarget(PreferenceTarget),
    Remote(RemoteConfig),
}

impl EndpointConfig {
    pub fn handle(&self, role: PolicyRole) -> Result<PolicyHandle> {
        let backend = match self {
            EndpointConfig::StubParaphraser(s) => Backend::Paraphraser(s.clone()),
            EndpointConfig::StubTarget(t) => Backend::Target(t.clone()),
            EndpointConfig::Remote(r) => Backend::Remote(RemoteClient::new(r.clone())?),
        };
        Ok(PolicyHandle::new(role, backend))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointsConfig {
    pub oracle: EndpointConfig,
    pub target: EndpointConfig,
}

impl Default for EndpointsConfig {
    fn default() -> Self {
        Self {
            oracle: EndpointConfig::StubParaphraser(StubParaphraser::default()),
            target: EndpointConfig::StubTarget(PreferenceTarget::default()),
        }
    }
}

/// Shape of the trainable language model; the vocabulary size follows the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = crate::lm::TransformerConfig::default();
        Self {
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_layers: t.n_layers,
            d_ff: t.d_ff,
            context: t.context,
        }
    }
}

impl ModelConfig {
    pub fn transformer(&self, vocab_size: usize) -> crate::lm::TransformerConfig {
        crate::lm::TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            context: self.context,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Share of the general-task corpus mixed into RL.
    pub sample_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { sample_fraction: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoding used to rewrite prompts and to query the target.
    pub generation: GenerationParams,
    /// Sampling used when comparing reward and drift of the trained policies.
    pub sampling: GenerationParams,
    pub samples_per_prompt: usize,
    pub top_k_words: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generation: GenerationParams::greedy(24),
            sampling: GenerationParams {
                temperature: 1.0,
                max_tokens: 24,
                seed: 0,
            },
            samples_per_prompt: 4,
            top_k_words: 3,
        }
    }
}

impl PipelineConfig {
    /// Parses TOML and resolves relative paths against `base`.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| MapoError::Config(e.to_string()))?;
        if let Some(base) = base {
            cfg.paths.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MapoError::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = StageSeeds::from_base(seed);
        self
    }

    pub fn digest(&self) -> String {
        rng::digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.sft.validate()?;
        self.reward.validate()?;
        self.rl.validate()?;
        self.warmup.generation.validate()?;
        self.eval.generation.validate()?;
        self.eval.sampling.validate()?;
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.n_layers == 0 || m.d_ff == 0 || m.context < 4 {
            return Err(MapoError::Config("model dimensions must be positive".into()));
        }
        if m.d_model > MAX_EMBED || m.context > MAX_CONTEXT || m.d_model % m.n_heads != 0 {
            return Err(MapoError::Config(format!(
                "model must have d_model <= {MAX_EMBED} divisible by n_heads and context <= {MAX_CONTEXT}"
            )));
        }
        if self.warmup.candidates == 0 {
            return Err(MapoError::Config("warmup.candidates must be positive".into()));
        }
        let s = self.warmup.split;
        if !(s.val >= 0.0 && s.test >= 0.0 && s.val + s.test < 1.0) {
            return Err(MapoError::Config("split fractions must be >= 0 and sum below 1".into()));
        }
        if !(self.pretrain.sample_fraction > 0.0 && self.pretrain.sample_fraction <= 1.0) {
            return Err(MapoError::Config("pretrain.sample_fraction must lie in (0, 1]".into()));
        }
        if self.eval.samples_per_prompt == 0 || self.eval.top_k_words == 0 {
            return Err(MapoError::Config("eval.samples_per_prompt and eval.top_k_words must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = PipelineConfig::from_toml_str(&text, None).unwrap();
        assert_eq!(cfg, back);
        let remote = PipelineConfig {
            endpoints: EndpointsConfig {
                oracle: EndpointConfig::Remote(RemoteConfig::default()),
                target: EndpointConfig::StubTarget(PreferenceTarget::default()),
            },
            ..cfg
        };
        let text = remote.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text, None).unwrap(), remote);
    }

    #[test]
    fn table_names_are_keys() {
        let text = PipelineConfig::default().to_toml_string().unwrap();
        for key in [
            "gamma",
            "clip_parameter",
            "entropy_coefficient",
            "value_loss_coefficient",
            "max_gradient_norm",
            "positive_lambda_coefficient",
            "negative_lambda_coefficient",
            "learning_rate_for_actor_model",
            "learning_rate_for_critic_model",
            "adam_optimizer_epsilon",
            "gradient_accumulation_steps",
            "weight_decay",
            "ppo_epochs",
            "gae_lambda",
        ] {
            assert!(text.contains(&format!("\n{key} = ")), "missing key {key}");
        }
    }

    #[test]
    fn recommended_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.sft.gradient_accumulation_steps, 8);
        assert_eq!(c.sft.weight_decay, 0.1);
        assert_eq!(c.rl.actor_learning_rate, 2e-5);
        assert_eq!(c.rl.critic_learning_rate, 1e-5);
        assert_eq!(c.rl.adam_eps, 1e-5);
        let w = c.rl.loss;
        assert_eq!(
            (w.entropy_coef, w.value_coef, w.mini_batch_size, w.discount_gamma, w.gae_lambda),
            (0.005, 0.5, 32, 0.99, 0.95)
        );
        assert_eq!((w.max_grad_norm, w.ppo_epochs, w.clip_epsilon), (0.5, 20, 0.2));
        assert_eq!((w.lambda_pos, w.lambda_neg), (2.0, 1.8));
        assert_eq!(c.pretrain.sample_fraction, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[sft]\nepochz = 3\n", None).is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1\n", None).is_err());
        assert!(PipelineConfig::from_toml_str("[rl.loss]\nclip_parameter = 0.3\n", None).is_ok());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[rl.loss]\ngamma = 1.5\n", None).is_err());
        assert!(PipelineConfig::from_toml_str("[model]\nd_model = 128\n", None).is_err());
        assert!(PipelineConfig::from_toml_str("[pretrain]\nsample_fraction = 0.0\n", None).is_err());
    }
}
