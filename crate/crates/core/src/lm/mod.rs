//! Language-model abstraction shared by every stage.
//!
//! A [`PolicyHandle`] pairs a [`PolicyRole`] with a backend: the trainable
//! [`ToyLm`], a [`RemoteClient`], or one of the deterministic stubs. Oracle
//! and target roles accept any backend, so a real endpoint and a stub are
//! interchangeable per stage.

pub mod remote;
pub mod stub;
pub mod toy;
pub mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{MapoError, Result};
pub use remote::{RemoteClient, RemoteConfig};
pub use stub::{PreferenceTarget, StubParaphraser};
pub use toy::ToyLm;
pub use transformer::{Transformer, TransformerConfig};

pub const MAX_GENERATION_TOKENS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_tokens: 32,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            max_tokens,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(MapoError::Config("temperature must be finite and >= 0".into()));
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_GENERATION_TOKENS {
            return Err(MapoError::Config(format!(
                "max_tokens must be in 1..={MAX_GENERATION_TOKENS}"
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogProb {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl SequenceLogProb {
    pub fn new(per_token: Vec<f64>) -> Self {
        let total = per_token.iter().sum();
        Self { per_token, total }
    }

    /// Log-probability per token; the length-normalized score used for ranking.
    pub fn mean(&self) -> f64 {
        self.total / self.per_token.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRole {
    Actor,
    FrozenSft,
    Oracle,
    TargetLlm,
}

#[derive(Clone, Debug)]
pub enum Backend {
    Toy(Box<ToyLm>),
    Remote(RemoteClient),
    Paraphraser(StubParaphraser),
    Target(PreferenceTarget),
}

impl Backend {
    fn kind(&self) -> &'static str {
        match self {
            Backend::Toy(_) => "toy",
            Backend::Remote(_) => "remote",
            Backend::Paraphraser(_) => "stub paraphraser",
            Backend::Target(_) => "stub target",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyHandle {
    pub role: PolicyRole,
    pub backend: Backend,
}

impl PolicyHandle {
    pub fn new(role: PolicyRole, backend: Backend) -> Self {
        Self { role, backend }
    }

    pub fn actor(lm: ToyLm) -> Self {
        Self::new(PolicyRole::Actor, Backend::Toy(Box::new(lm)))
    }

    pub fn is_trainable(&self) -> bool {
        self.role != PolicyRole::FrozenSft && matches!(self.backend, Backend::Toy(_))
    }

    pub fn toy(&self) -> Option<&ToyLm> {
        match &self.backend {
            Backend::Toy(lm) => Some(lm),
            _ => None,
        }
    }

    /// Mutable access to trainable parameters; `None` for frozen or non-toy models.
    pub fn toy_mut(&mut self) -> Option<&mut ToyLm> {
        if self.role == PolicyRole::FrozenSft {
            return None;
        }
        match &mut self.backend {
            Backend::Toy(lm) => Some(lm),
            _ => None,
        }
    }

    fn require_toy(&self) -> Result<&ToyLm> {
        self.toy().ok_or(MapoError::Unsupported(self.backend.kind()))
    }

    /// Token-level generation; only the in-process model works on token ids.
    pub fn generate(&self, prompt: &TokenSequence, params: &GenerationParams) -> Result<TokenSequence> {
        self.require_toy()?.generate(prompt, params)
    }

    pub fn generate_text(&self, prompt: &str, params: &GenerationParams) -> Result<String> {
        match &self.backend {
            Backend::Toy(lm) => lm.generate_text(prompt, params),
            Backend::Remote(client) => client.generate_text(prompt, params),
            Backend::Paraphraser(stub) => {
                params.validate()?;
                Ok(stub.generate_text(prompt, params))
            }
            Backend::Target(stub) => {
                params.validate()?;
                Ok(stub.generate_text(prompt))
            }
        }
    }

    pub fn sequence_logprob(&self, prompt: &TokenSequence, completion: &TokenSequence) -> Result<SequenceLogProb> {
        self.require_toy()?
            .sequence_logprob(&prompt.token_ids, &completion.token_ids)
    }

    /// Deep copy with role [`PolicyRole::FrozenSft`].
    pub fn clone_frozen(&self) -> Result<PolicyHandle> {
        let lm = self.require_toy()?;
        Ok(PolicyHandle::new(PolicyRole::FrozenSft, Backend::Toy(Box::new(lm.clone()))))
    }
}

/// `n` rewrites of `original` from the oracle. The deterministic stub rewrites
/// directly; any other backend receives the rewrite instruction once per
/// candidate with seeds `params.seed + i`.
pub fn paraphrase(
    oracle: &PolicyHandle,
    original: &str,
    n: usize,
    params: &GenerationParams,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(MapoError::InvalidInput("paraphrase count must be at least 1".into()));
    }
    if let Backend::Paraphraser(stub) = &oracle.backend {
        return Ok(stub.paraphrase(original, n));
    }
    let instruction = stub::rewrite_instruction(original);
    (0..n as u64)
        .map(|i| oracle.generate_text(&instruction, &params.with_seed(params.seed.wrapping_add(i))))
        .collect()
}
