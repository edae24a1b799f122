//! Causal transformer decoder: pre-norm blocks with RMS norm, rotary
//! position embeddings, gated (SwiGLU) feed-forward and a tied LM head.
//!
//! Weights are stored `[in x out]` and applied as `x * W`.

mod generate;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::counter::{self, Component};
use crate::tensor::kernels::RopeTable;
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::tokenizer::TokenId;

pub use generate::{generate, GenerateOptions, KvCache, Sampling};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl DecoderConfig {
    /// Default text-encoder shape: width 64, 4 layers, 4 heads.
    pub fn encoder(vocab_size: usize) -> Self {
        DecoderConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 192,
            vocab_size,
            max_seq_len: 1024,
            rope_base: 10_000.0,
        }
    }

    /// Default main-decoder shape: width 128, 6 layers, 8 heads.
    pub fn main(vocab_size: usize) -> Self {
        DecoderConfig {
            d_model: 128,
            n_layers: 6,
            n_heads: 8,
            d_ff: 384,
            vocab_size,
            max_seq_len: 1024,
            rope_base: 10_000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad(format!("decoder dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }

    /// Number of scalar parameters; a pure function of the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 2 * d + 4 * d * d + 3 * d * self.d_ff;
        self.vocab_size * d + self.n_layers * per_block + d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

const BLOCK_PARAMS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl<T: Float> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Decoder parameters plus the derived rotary table.
#[derive(Clone, Debug)]
pub struct DecoderModel<T = f32> {
    config: DecoderConfig,
    pub embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    rope: Arc<RopeTable<T>>,
}

impl<T: Float> PartialEq for DecoderModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.blocks == other.blocks
            && self.final_norm == other.final_norm
    }
}

/// Tape handles for every parameter of one model, in [`DecoderModel::params`] order.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub embedding: Var,
    pub blocks: Vec<[Var; 9]>,
    pub final_norm: Var,
}

impl DecoderVars {
    /// Inverse of [`Self::all`].
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        if vars.len() < 2 || (vars.len() - 2) % 9 != 0 {
            return Err(Error::Usage(format!("{} vars do not form a decoder", vars.len())));
        }
        let blocks = vars[1..vars.len() - 1]
            .chunks(9)
            .map(|c| <[Var; 9]>::try_from(c).expect("chunk of 9"))
            .collect();
        Ok(DecoderVars {
            embedding: vars[0],
            blocks,
            final_norm: vars[vars.len() - 1],
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.final_norm);
        out
    }
}

impl<T: Float> DecoderModel<T> {
    /// Random init: N(0, 0.02) everywhere, output projections additionally
    /// scaled by `1/sqrt(2 * n_layers)`, norm gains at one.
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let out_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let embedding = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: Tensor::ones(&[d]),
                wq: Tensor::randn(&[d, d], INIT_STD, rng),
                wk: Tensor::randn(&[d, d], INIT_STD, rng),
                wv: Tensor::randn(&[d, d], INIT_STD, rng),
                wo: Tensor::randn(&[d, d], out_std, rng),
                ffn_norm: Tensor::ones(&[d]),
                w_gate: Tensor::randn(&[d, config.d_ff], INIT_STD, rng),
                w_up: Tensor::randn(&[d, config.d_ff], INIT_STD, rng),
                w_down: Tensor::randn(&[config.d_ff, d], out_std, rng),
            })
            .collect();
        let final_norm = Tensor::ones(&[d]);
        Ok(Self::from_parts(config, embedding, blocks, final_norm))
    }

    fn from_parts(config: DecoderConfig, embedding: Tensor<T>, blocks: Vec<Block<T>>, final_norm: Tensor<T>) -> Self {
        let rope = Arc::new(RopeTable::new(config.head_dim(), config.max_seq_len, config.rope_base));
        DecoderModel {
            config,
            embedding,
            blocks,
            final_norm,
            rope,
        }
    }

    /// Rebuilds a model from named tensors as produced by [`Self::params`].
    pub fn from_named(config: DecoderConfig, mut take: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let check = |t: Tensor<T>, name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let embedding = check(take("embedding")?, "embedding", &[config.vocab_size, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut get = |p: &str, shape: &[usize]| -> Result<Tensor<T>> {
                let name = format!("blocks.{i}.{p}");
                check(take(&name)?, &name, shape)
            };
            blocks.push(Block {
                attn_norm: get("attn_norm", &[d])?,
                wq: get("wq", &[d, d])?,
                wk: get("wk", &[d, d])?,
                wv: get("wv", &[d, d])?,
                wo: get("wo", &[d, d])?,
                ffn_norm: get("ffn_norm", &[d])?,
                w_gate: get("w_gate", &[d, config.d_ff])?,
                w_up: get("w_up", &[d, config.d_ff])?,
                w_down: get("w_down", &[config.d_ff, d])?,
            });
        }
        let final_norm = check(take("final_norm")?, "final_norm", &[d])?;
        Ok(Self::from_parts(config, embedding, blocks, final_norm))
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAMS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    /// Mutable parameters in [`Self::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> DecoderModel<U> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                attn_norm: b.attn_norm.cast(),
                wq: b.wq.cast(),
                wk: b.wk.cast(),
                wv: b.wv.cast(),
                wo: b.wo.cast(),
                ffn_norm: b.ffn_norm.cast(),
                w_gate: b.w_gate.cast(),
                w_up: b.w_up.cast(),
                w_down: b.w_down.cast(),
            })
            .collect();
        DecoderModel::from_parts(self.config.clone(), self.embedding.cast(), blocks, self.final_norm.cast())
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> DecoderVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone().with_requires_grad(trainable));
        let embedding = leaf(&self.embedding);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.tensors().map(&mut leaf))
            .collect();
        let final_norm = leaf(&self.final_norm);
        DecoderVars {
            embedding,
            blocks,
            final_norm,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Input embeddings: optional soft prefix rows followed by token rows.
    fn embed_taped(&self, tape: &mut Tape<T>, vars: &DecoderVars, prefix: Option<Var>, ids: &[TokenId]) -> Result<Var> {
        let p = prefix.map(|v| tape.value(v).rows()).unwrap_or(0);
        self.check_len(p + ids.len())?;
        if let Some(pv) = prefix {
            if tape.value(pv).cols() != self.config.d_model || tape.value(pv).rank() != 2 {
                return Err(Error::Dimension {
                    op: "prefix",
                    lhs: tape.value(pv).shape().to_vec(),
                    rhs: vec![p, self.config.d_model],
                });
            }
        }
        match prefix {
            Some(pv) if p > 0 && ids.is_empty() => Ok(pv),
            Some(pv) if p > 0 => {
                let tok = tape.embedding(vars.embedding, ids)?;
                tape.concat_rows(&[pv, tok])
            }
            _ => tape.embedding(vars.embedding, ids),
        }
    }

    /// Final-normed hidden states for `[prefix; embed(ids)]` at positions
    /// `0..P+T`, recorded on `tape`.
    pub fn hidden_taped(&self, tape: &mut Tape<T>, vars: &DecoderVars, prefix: Option<Var>, ids: &[TokenId]) -> Result<Var> {
        let mut x = self.embed_taped(tape, vars, prefix, ids)?;
        let heads = self.config.n_heads;
        for bv in &vars.blocks {
            let [attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down] = *bv;
            let h = tape.rms_norm(x, attn_norm)?;
            let (q, k, v) = counter::with_component(Component::Projections, || -> Result<_> {
                Ok((tape.matmul(h, wq)?, tape.matmul(h, wk)?, tape.matmul(h, wv)?))
            })?;
            let q = tape.rope(q, heads, 0, &self.rope)?;
            let k = tape.rope(k, heads, 0, &self.rope)?;
            let a = tape.causal_attention(q, k, v, heads)?;
            let o = counter::with_component(Component::Projections, || tape.matmul(a, wo))?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x, ffn_norm)?;
            let f = counter::with_component(Component::FeedForward, || -> Result<_> {
                let g = tape.matmul(h, w_gate)?;
                let u = tape.matmul(h, w_up)?;
                let s = tape.swiglu(g, u)?;
                tape.matmul(s, w_down)
            })?;
            x = tape.add(x, f)?;
        }
        tape.rms_norm(x, vars.final_norm)
    }

    /// Tied LM head: `hidden * embedding^T`.
    pub fn logits_taped(&self, tape: &mut Tape<T>, vars: &DecoderVars, hidden: Var) -> Result<Var> {
        counter::with_component(Component::LmHead, || tape.matmul_nt(hidden, vars.embedding))
    }

    /// Hidden states `[T x d_model]` after the final norm.
    pub fn forward_hidden(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let h = self.hidden_taped(&mut tape, &vars, None, ids)?;
        Ok(tape.value(h).clone())
    }

    /// Logits `[(P+T) x vocab]` for a soft prefix followed by tokens.
    pub fn forward_logits(&self, prefix: Option<&Tensor<T>>, ids: &[TokenId]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let pv = prefix.map(|p| tape.leaf(p.clone()));
        let h = self.hidden_taped(&mut tape, &vars, pv, ids)?;
        let logits = self.logits_taped(&mut tape, &vars, h)?;
        Ok(tape.value(logits).clone())
    }

    /// Attention probabilities per layer, each `[heads x T x T]`.
    pub fn attention_maps(&self, ids: &[TokenId]) -> Result<Vec<Tensor<T>>> {
        let mut cache = KvCache::new(self);
        let mut maps = Vec::new();
        self.extend(&mut cache, self.embed_rows(ids)?, Some(&mut maps))?;
        Ok(maps)
    }

    pub(crate) fn embed_rows(&self, ids: &[TokenId]) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id as usize,
                    size: vocab,
                });
            }
            out.extend_from_slice(self.embedding.row(id as usize));
        }
        Ok(out)
    }
}

/// `(i, j)` is permitted iff `j <= i`.
pub fn causal_mask(t: usize) -> Vec<Vec<bool>> {
    (0..t).map(|i| (0..t).map(|j| j <= i).collect()).collect()
}
