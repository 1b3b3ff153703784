//! Value model: a transformer backbone with a linear head read at every
//! position, estimating the return from each partial rewrite.

use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::error::{MapoError, Result};
use crate::lm::toy::{load_model, save_model};
use crate::lm::{ToyLm, Transformer};
use crate::params::ParamId;
use crate::reward::RewardModel;
use crate::tensor::Matrix;
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: Transformer,
    head_w: ParamId,
    head_b: ParamId,
    pub vocab: Vocab,
}

impl Critic {
    /// Starts from the reward model: same backbone, its scoring head reused
    /// as the value head.
    pub fn from_reward(rm: &RewardModel) -> Self {
        let net = rm.net.clone();
        Self::bind(net, rm.vocab.clone()).expect("reward model carries a scalar head")
    }

    /// Fresh zero head on a copy of the language model's backbone.
    pub fn from_lm(lm: &ToyLm) -> Self {
        let mut net = lm.net.backbone_copy();
        let d = net.config.d_model;
        net.add_param("score_w", Matrix::zeros(d, 1));
        net.add_param("score_b", Matrix::zeros(1, 1));
        Self::bind(net, lm.vocab.clone()).expect("head just added")
    }

    fn bind(net: Transformer, vocab: Vocab) -> Result<Self> {
        let find = |n: &str| {
            net.params
                .id_of(n)
                .ok_or_else(|| MapoError::InvalidInput(format!("missing parameter `{n}`")))
        };
        Ok(Self {
            head_w: find("score_w")?,
            head_b: find("score_b")?,
            net,
            vocab,
        })
    }

    /// `T x 1` value per input position.
    pub fn values_var(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        let h = self.net.hidden(g, ids)?;
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let v = g.matmul(h, w);
        Ok(g.add_row(v, b))
    }

    /// Values at the positions that emit `response` after `<bos> input <sep>`.
    pub fn response_values_var(&self, g: &mut Graph, input: &[u32], response: &[u32]) -> Result<Var> {
        if response.is_empty() {
            return Err(MapoError::EmptyCompletion);
        }
        let mut seq = ToyLm::context_ids(input);
        let start = seq.len() - 1;
        seq.extend_from_slice(&response[..response.len() - 1]);
        let all = self.values_var(g, &seq)?;
        Ok(g.slice_rows(all, start, response.len()))
    }

    pub fn response_values(&self, input: &[u32], response: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.net.params);
        let v = self.response_values_var(&mut g, input, response)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(dir, "critic", &self.net.config, &self.vocab, &self.net.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = load_model(dir, "critic")?;
        Self::bind(
            Transformer::from_store(manifest.config, params)?,
            Vocab::from_tokens(manifest.vocab),
        )
    }
}
