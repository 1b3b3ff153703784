//! A small pre-norm decoder-only transformer built on [`crate::autograd`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{MapoError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Matrix;

pub const MAX_VOCAB: usize = 256;
pub const MAX_EMBED: usize = 64;
pub const MAX_CONTEXT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            context: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MapoError::Config(m));
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return bad(format!("vocab_size must be in 1..={MAX_VOCAB}"));
        }
        if self.d_model == 0 || self.d_model > MAX_EMBED {
            return bad(format!("d_model must be in 1..={MAX_EMBED}"));
        }
        if self.context == 0 || self.context > MAX_CONTEXT {
            return bad(format!("context must be in 1..={MAX_CONTEXT}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads".into());
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Backbone weights plus any head parameters stored alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

const LN_EPS: f64 = 1e-5;

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let a = std * 3f64.sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

impl Transformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, &["transformer-init"]);
        let d = config.d_model;
        let mut store = ParamStore::default();
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        store.insert("tok_emb", uniform(&mut rng, config.vocab_size, d, 0.5));
        store.insert("pos_emb", uniform(&mut rng, config.context, d, 0.1));
        for l in 0..config.n_layers {
            let p = |n: &str| format!("blk{l}.{n}");
            store.insert(p("ln1_g"), Matrix::filled(1, d, 1.0));
            store.insert(p("ln1_b"), Matrix::zeros(1, d));
            store.insert(p("wq"), uniform(&mut rng, d, d, proj_std));
            store.insert(p("wk"), uniform(&mut rng, d, d, proj_std));
            store.insert(p("wv"), uniform(&mut rng, d, d, proj_std));
            store.insert(p("wo"), uniform(&mut rng, d, d, resid_std));
            store.insert(p("ln2_g"), Matrix::filled(1, d, 1.0));
            store.insert(p("ln2_b"), Matrix::zeros(1, d));
            store.insert(p("w1"), uniform(&mut rng, d, config.d_ff, proj_std));
            store.insert(p("b1"), Matrix::zeros(1, config.d_ff));
            store.insert(p("w2"), uniform(&mut rng, config.d_ff, d, resid_std));
            store.insert(p("b2"), Matrix::zeros(1, d));
        }
        store.insert("lnf_g", Matrix::filled(1, d, 1.0));
        store.insert("lnf_b", Matrix::zeros(1, d));
        Self::from_store(config, store)
    }

    /// Binds a parameter store (possibly containing extra head tensors) by name.
    pub fn from_store(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = params
                .id_of(name)
                .ok_or_else(|| MapoError::InvalidInput(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(MapoError::InvalidInput(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let d = config.d_model;
        let f = config.d_ff;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("blk{l}.{s}");
            layers.push(LayerIds {
                ln1_g: find(&n("ln1_g"), (1, d))?,
                ln1_b: find(&n("ln1_b"), (1, d))?,
                wq: find(&n("wq"), (d, d))?,
                wk: find(&n("wk"), (d, d))?,
                wv: find(&n("wv"), (d, d))?,
                wo: find(&n("wo"), (d, d))?,
                ln2_g: find(&n("ln2_g"), (1, d))?,
                ln2_b: find(&n("ln2_b"), (1, d))?,
                w1: find(&n("w1"), (d, f))?,
                b1: find(&n("b1"), (1, f))?,
                w2: find(&n("w2"), (f, d))?,
                b2: find(&n("b2"), (1, d))?,
            });
        }
        Ok(Self {
            tok_emb: find("tok_emb", (config.vocab_size, d))?,
            pos_emb: find("pos_emb", (config.context, d))?,
            lnf_g: find("lnf_g", (1, d))?,
            lnf_b: find("lnf_b", (1, d))?,
            layers,
            config,
            params,
        })
    }

    /// A new transformer holding only the backbone tensors of `self`.
    pub fn backbone_copy(&self) -> Transformer {
        let mut store = ParamStore::default();
        for (name, m) in self.params.iter() {
            if name.starts_with("blk") || name.starts_with("lnf_") || name.ends_with("_emb") {
                store.insert(name, m.clone());
            }
        }
        Transformer::from_store(self.config, store).expect("backbone tensors are complete")
    }

    pub fn add_param(&mut self, name: &str, value: Matrix) -> ParamId {
        self.params.insert(name, value)
    }

    pub fn check_length(&self, len: usize) -> Result<()> {
        if len == 0 || len > self.config.context {
            return Err(MapoError::ContextOverflow {
                len,
                context: self.config.context,
            });
        }
        Ok(())
    }

    fn layer_norm(g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = g.normalize(x, LN_EPS);
        let gv = g.param(gain);
        let bv = g.param(bias);
        let n = g.mul_row(n, gv);
        g.add_row(n, bv)
    }

    /// Final hidden states, one row per input token.
    pub fn hidden(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        self.check_length(tokens.len())?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(MapoError::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let t = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let te = g.gather(tok, &ids);
        let pe = g.gather(pos, &positions);
        let mut x = g.add(te, pe);

        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let h = Self::layer_norm(g, x, layer.ln1_g, layer.ln1_b);
            let (wq, wk, wv) = (g.param(layer.wq), g.param(layer.wk), g.param(layer.wv));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let attn = g.causal_softmax(scores);
                outs.push(g.matmul(attn, vh));
            }
            let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let wo = g.param(layer.wo);
            let att = g.matmul(att, wo);
            x = g.add(x, att);

            let h = Self::layer_norm(g, x, layer.ln2_g, layer.ln2_b);
            let (w1, b1, w2, b2) = (
                g.param(layer.w1),
                g.param(layer.b1),
                g.param(layer.w2),
                g.param(layer.b2),
            );
            let f = g.matmul(h, w1);
            let f = g.add_row(f, b1);
            let f = g.gelu(f);
            let f = g.matmul(f, w2);
            let f = g.add_row(f, b2);
            x = g.add(x, f);
        }
        Ok(Self::layer_norm(g, x, self.lnf_g, self.lnf_b))
    }
}
