//! Context compression: memory-token augmentation, latent extraction from
//! the encoder and projection into the main decoder's embedding space.

mod pipeline;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::counter::{self, Component};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, Tokenizer};
use crate::transformer::{DecoderModel, DecoderVars};

pub use pipeline::{Pipeline, PipelineConfig, PipelineVars, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Memory tokens appended per context (`N`).
    pub n_memory: usize,
    /// Longest accepted context in tokens (`L_max`).
    pub max_context: usize,
}

impl CompressionConfig {
    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<()> {
        if self.n_memory == 0 {
            return Err(Error::ZeroMemory);
        }
        if self.n_memory > tokenizer.max_memory() {
            return Err(Error::Capacity {
                requested: self.n_memory,
                max: tokenizer.max_memory(),
            });
        }
        if self.max_context == 0 {
            return Err(Error::Config("max_context must be positive".into()));
        }
        Ok(())
    }

    pub fn ratio(&self, context_len: usize) -> Result<Ratio<usize>> {
        compression_ratio(context_len, self.n_memory)
    }
}

/// `L / N` as an exact reduced fraction.
pub fn compression_ratio(l: usize, n: usize) -> Result<Ratio<usize>> {
    if n == 0 {
        return Err(Error::ZeroMemory);
    }
    Ok(Ratio::new(l, n))
}

/// Encoder latents at the memory positions, `[N x d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEmbedding<T = f32>(pub Tensor<T>);

/// Projected latents fed to the main decoder, `[N x d_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding<T = f32>(pub Tensor<T>);

impl<T> MemoryEmbedding<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

impl<T> ContextEmbedding<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Appends `memory_0 .. memory_{n-1}` to the context. Never truncates.
pub fn augment_context(tokenizer: &Tokenizer, context: &[TokenId], n: usize, max_len: usize) -> Result<Vec<TokenId>> {
    if context.is_empty() {
        return Err(Error::Contract("cannot compress an empty context".into()));
    }
    if context.len() + n > max_len {
        return Err(Error::Truncation {
            len: context.len(),
            memory: n,
            max: max_len,
        });
    }
    let mut out = Vec::with_capacity(context.len() + n);
    out.extend_from_slice(context);
    out.extend(tokenizer.memory_token_ids(n)?);
    Ok(out)
}

fn check_tail(tokenizer: &Tokenizer, augmented: &[TokenId], n: usize) -> Result<()> {
    let want = tokenizer.memory_token_ids(n)?;
    if augmented.len() < n || augmented[augmented.len() - n..] != want[..] {
        return Err(Error::Contract(format!(
            "augmented input must end with memory_0..memory_{} in order",
            n.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Runs the encoder over an augmented context and keeps the last `n` rows.
pub fn encode_context<T: Float>(
    encoder: &DecoderModel<T>,
    tokenizer: &Tokenizer,
    augmented: &[TokenId],
    n: usize,
) -> Result<MemoryEmbedding<T>> {
    check_tail(tokenizer, augmented, n)?;
    let z = encoder.forward_hidden(augmented)?;
    Ok(MemoryEmbedding(z.slice_rows(z.rows() - n, n)?))
}

/// Taped counterpart of [`encode_context`].
pub fn encode_context_taped<T: Float>(
    encoder: &DecoderModel<T>,
    tape: &mut Tape<T>,
    vars: &DecoderVars,
    tokenizer: &Tokenizer,
    augmented: &[TokenId],
    n: usize,
) -> Result<Var> {
    check_tail(tokenizer, augmented, n)?;
    let z = encoder.hidden_taped(tape, vars, None, augmented)?;
    let rows = tape.value(z).rows();
    tape.slice_rows(z, rows - n, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Two-layer MLP `d_s -> d_proj -> d_l`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectorVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

const PROJECTOR_PARAMS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl<T: Float> Projector<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, activation: Activation, rng: &mut R) -> Self {
        Projector {
            w1: Tensor::randn(&[d_in, d_hidden], 0.02, rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::randn(&[d_hidden, d_out], 0.02, rng),
            b2: Tensor::zeros(&[d_out]),
            activation,
        }
    }

    /// Pass-through configuration: identity weights, zero biases, no
    /// nonlinearity.
    pub fn identity(d: usize) -> Self {
        Projector {
            w1: Tensor::eye(d),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::eye(d),
            b2: Tensor::zeros(&[d]),
            activation: Activation::Identity,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let ts = [&self.w1, &self.b1, &self.w2, &self.b2];
        PROJECTOR_PARAMS.iter().map(|s| s.to_string()).zip(ts).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Rebuilds from named tensors as produced by [`Self::params`].
    pub fn from_named(activation: Activation, mut take: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        let p = Projector {
            w1: take("w1")?,
            b1: take("b1")?,
            w2: take("w2")?,
            b2: take("b2")?,
            activation,
        };
        let ok = p.w1.rank() == 2
            && p.w2.rank() == 2
            && p.b1.shape() == [p.d_hidden()]
            && p.w2.shape()[0] == p.d_hidden()
            && p.b2.shape() == [p.d_out()];
        if !ok {
            return Err(Error::Format("projector tensors have inconsistent shapes".into()));
        }
        Ok(p)
    }

    pub fn cast<U: Float>(&self) -> Projector<U> {
        Projector {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            activation: self.activation,
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ProjectorVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone().with_requires_grad(trainable));
        ProjectorVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    pub fn forward_taped(&self, tape: &mut Tape<T>, vars: &ProjectorVars, m: Var) -> Result<Var> {
        counter::with_component(Component::Other, || {
            let h = tape.matmul(m, vars.w1)?;
            let h = tape.add_bias(h, vars.b1)?;
            let h = match self.activation {
                Activation::Gelu => tape.gelu(h)?,
                Activation::Identity => h,
            };
            let out = tape.matmul(h, vars.w2)?;
            tape.add_bias(out, vars.b2)
        })
    }

    /// `E = Phi(M)`.
    pub fn project(&self, m: &MemoryEmbedding<T>) -> Result<ContextEmbedding<T>> {
        if m.0.rank() != 2 || m.0.cols() != self.d_in() {
            return Err(Error::Dimension {
                op: "project",
                lhs: m.0.shape().to_vec(),
                rhs: self.w1.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.leaf(m.0.clone());
        let e = self.forward_taped(&mut tape, &vars, x)?;
        Ok(ContextEmbedding(tape.value(e).clone()))
    }
}
