//! Model-adaptive prompt optimization.
//!
//! A prompt rewriter is trained in three stages against a specific target
//! model: a warm-up dataset of (original, optimized) prompt pairs is mined by
//! scoring paraphrases on the target, a small language model is fine-tuned on
//! those pairs, and the result is refined with reinforcement learning against
//! a reward model that imitates the target's preferences.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod reward;
pub mod rl;
pub mod rng;
pub mod sft;
pub mod tensor;
pub mod tokenizer;
pub mod warmup;

pub use error::{MapoError, Result};
pub use lm::{GenerationParams, PolicyHandle, PolicyRole, SequenceLogProb, TokenSequence, ToyLm};
pub use metrics::{Score, TaskKind, TokenizedText};
pub use tensor::Matrix;
