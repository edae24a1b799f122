//! The full compressor: encoder, projector and main decoder as one unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    augment_context, encode_context, encode_context_taped, Activation, CompressionConfig, ContextEmbedding,
    MemoryEmbedding, Projector, ProjectorVars,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, Tokenizer, BASE_VOCAB, BOS, EOS, RESTORE};
use crate::transformer::{generate, DecoderConfig, DecoderModel, DecoderVars, GenerateOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Size of the memory-token pool in the tokenizer (`N_max`).
    pub max_memory: usize,
    pub compression: CompressionConfig,
    pub encoder: DecoderConfig,
    pub decoder: DecoderConfig,
    pub d_proj: usize,
    pub activation: Activation,
}

impl PipelineConfig {
    /// Default toy shapes with `n_memory` memory tokens.
    pub fn toy(n_memory: usize) -> Self {
        let tokenizer = Tokenizer::default();
        let decoder = DecoderConfig::main(BASE_VOCAB);
        PipelineConfig {
            max_memory: tokenizer.max_memory(),
            compression: CompressionConfig {
                n_memory,
                max_context: 512,
            },
            encoder: DecoderConfig::encoder(tokenizer.vocab_size()),
            d_proj: decoder.d_model,
            decoder,
            activation: Activation::Gelu,
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.max_memory)
    }

    pub fn validate(&self) -> Result<()> {
        let tok = self.tokenizer();
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.compression.validate(&tok)?;
        if self.encoder.vocab_size != tok.vocab_size() {
            return Err(Error::Config(format!(
                "encoder vocabulary {} must equal tokenizer vocabulary {}",
                self.encoder.vocab_size,
                tok.vocab_size()
            )));
        }
        if self.decoder.vocab_size < BASE_VOCAB {
            return Err(Error::Config(format!(
                "decoder vocabulary {} cannot hold the {BASE_VOCAB} byte and control tokens",
                self.decoder.vocab_size
            )));
        }
        if self.d_proj == 0 {
            return Err(Error::Config("d_proj must be positive".into()));
        }
        Ok(())
    }
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub encoder: bool,
    pub projector: bool,
    pub decoder: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            encoder: true,
            projector: true,
            decoder: true,
        }
    }
}

impl Trainable {
    pub fn any(&self) -> bool {
        self.encoder || self.projector || self.decoder
    }
}

#[derive(Clone, Debug)]
pub struct PipelineVars {
    pub encoder: DecoderVars,
    pub projector: ProjectorVars,
    pub decoder: DecoderVars,
}

impl PipelineVars {
    /// All handles in [`Pipeline::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.encoder.all();
        out.extend(self.projector.all());
        out.extend(self.decoder.all());
        out
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline<T = f32> {
    config: PipelineConfig,
    tokenizer: Tokenizer,
    pub encoder: DecoderModel<T>,
    pub projector: Projector<T>,
    pub decoder: DecoderModel<T>,
}

impl<T: Float> PartialEq for Pipeline<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.encoder == other.encoder
            && self.projector == other.projector
            && self.decoder == other.decoder
    }
}

fn prefixed<'a, T>(prefix: &str, v: Vec<(String, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

impl<T: Float> Pipeline<T> {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = DecoderModel::new(config.encoder.clone(), &mut rng)?;
        let projector = Projector::new(
            config.encoder.d_model,
            config.d_proj,
            config.decoder.d_model,
            config.activation,
            &mut rng,
        );
        let decoder = DecoderModel::new(config.decoder.clone(), &mut rng)?;
        Self::from_parts(config, encoder, projector, decoder)
    }

    pub fn from_parts(
        config: PipelineConfig,
        encoder: DecoderModel<T>,
        projector: Projector<T>,
        decoder: DecoderModel<T>,
    ) -> Result<Self> {
        config.validate()?;
        if encoder.config() != &config.encoder || decoder.config() != &config.decoder {
            return Err(Error::Config("model configs disagree with the pipeline config".into()));
        }
        if projector.d_in() != config.encoder.d_model
            || projector.d_out() != config.decoder.d_model
            || projector.d_hidden() != config.d_proj
        {
            return Err(Error::Config("projector shape disagrees with the pipeline config".into()));
        }
        Ok(Pipeline {
            tokenizer: config.tokenizer(),
            config,
            encoder,
            projector,
            decoder,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn n_memory(&self) -> usize {
        self.config.compression.n_memory
    }

    /// Named parameters prefixed `pi_s.`, `projector.` and `pi_l.`.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("pi_s", self.encoder.params());
        out.extend(prefixed("projector", self.projector.params()));
        out.extend(prefixed("pi_l", self.decoder.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.projector.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> Pipeline<U> {
        Pipeline {
            config: self.config.clone(),
            tokenizer: self.tokenizer,
            encoder: self.encoder.cast(),
            projector: self.projector.cast(),
            decoder: self.decoder.cast(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: Trainable) -> PipelineVars {
        PipelineVars {
            encoder: self.encoder.register(tape, trainable.encoder),
            projector: self.projector.register(tape, trainable.projector),
            decoder: self.decoder.register(tape, trainable.decoder),
        }
    }

    fn augment(&self, context: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        let limit = (self.config.compression.max_context + n).min(self.config.encoder.max_seq_len);
        augment_context(&self.tokenizer, context, n, limit)
    }

    /// `(M, E)` for a context using `n` memory tokens.
    pub fn compress_with(&self, context: &[TokenId], n: usize) -> Result<(MemoryEmbedding<T>, ContextEmbedding<T>)> {
        if n == 0 {
            return Err(Error::ZeroMemory);
        }
        let augmented = self.augment(context, n)?;
        let m = encode_context(&self.encoder, &self.tokenizer, &augmented, n)?;
        let e = self.projector.project(&m)?;
        Ok((m, e))
    }

    pub fn compress(&self, context: &[TokenId]) -> Result<(MemoryEmbedding<T>, ContextEmbedding<T>)> {
        self.compress_with(context, self.n_memory())
    }

    /// Taped `E = Phi(pi_s(C + memory tokens))`.
    pub fn compress_taped(&self, tape: &mut Tape<T>, vars: &PipelineVars, context: &[TokenId]) -> Result<Var> {
        let n = self.n_memory();
        let augmented = self.augment(context, n)?;
        let m = encode_context_taped(&self.encoder, tape, &vars.encoder, &self.tokenizer, &augmented, n)?;
        self.projector.forward_taped(tape, &vars.projector, m)
    }

    /// Decodes `len` tokens after `[E, restore]`.
    pub fn restore_from(&self, e: &ContextEmbedding<T>, len: usize) -> Result<Vec<TokenId>> {
        generate(&self.decoder, Some(&e.0), &[RESTORE], &GenerateOptions::greedy(len))
    }

    /// Compresses a context and greedily reconstructs `|C|` tokens.
    pub fn restore(&self, context: &[TokenId]) -> Result<Vec<TokenId>> {
        let (_, e) = self.compress(context)?;
        self.restore_from(&e, context.len())
    }

    /// Greedy answer to `prompt` given a compressed context; stops at (and
    /// drops) the end-of-sequence token.
    pub fn answer_from(&self, e: &ContextEmbedding<T>, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        let mut input = Vec::with_capacity(prompt.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prompt);
        let mut out = generate(&self.decoder, Some(&e.0), &input, &GenerateOptions::greedy(max_new).stop_at(EOS))?;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        Ok(out)
    }

    pub fn answer(&self, context: &[TokenId], prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        let (_, e) = self.compress(context)?;
        self.answer_from(&e, prompt, max_new)
    }
}
