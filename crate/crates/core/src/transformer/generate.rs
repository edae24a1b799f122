//! Incremental (KV-cached) inference and autoregressive generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DecoderModel;
use crate::error::{Error, Result};
use crate::tensor::counter::{self, Component};
use crate::tensor::kernels::{self, RMS_EPS};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::TokenId;

/// Per-layer post-rotary keys and values for positions `0..len`.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    max: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(model: &DecoderModel<T>) -> Self {
        let n = model.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            max: model.config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn project<T: Float>(x: &[T], w: &Tensor<T>, rows: usize) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); rows * n];
    kernels::matmul_into(x, w.data(), &mut out, rows, k, n, false, false, false);
    out
}

impl<T: Float> DecoderModel<T> {
    /// Runs `x` (`t x d` input embeddings) through every layer at positions
    /// `cache.len()..`, appending to the cache. Returns the final-normed
    /// hidden rows. When `maps` is given, attention probabilities are pushed
    /// per layer.
    pub(crate) fn extend(
        &self,
        cache: &mut KvCache<T>,
        mut x: Vec<T>,
        mut maps: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let t = x.len() / d;
        let pos0 = cache.len;
        if pos0 + t > cache.max {
            return Err(Error::SequenceLength {
                len: pos0 + t,
                max: cache.max,
            });
        }
        for (li, b) in self.blocks.iter().enumerate() {
            let (h, _) = kernels::rms_norm_forward(&x, b.attn_norm.data(), d, RMS_EPS);
            let (mut q, mut k, v) = counter::with_component(Component::Projections, || {
                (project(&h, &b.wq, t), project(&h, &b.wk, t), project(&h, &b.wv, t))
            });
            self.rope.apply(&mut q, d, heads, pos0, false);
            self.rope.apply(&mut k, d, heads, pos0, false);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let tk = pos0 + t;
            let (a, probs) = kernels::attention_forward(
                &q,
                &cache.keys[li],
                &cache.values[li],
                t,
                tk,
                d,
                heads,
                pos0,
                maps.is_some(),
            );
            if let (Some(m), Some(p)) = (maps.as_deref_mut(), probs) {
                m.push(Tensor::new(vec![heads, t, tk], p)?);
            }
            let o = counter::with_component(Component::Projections, || project(&a, &b.wo, t));
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }
            let (h, _) = kernels::rms_norm_forward(&x, b.ffn_norm.data(), d, RMS_EPS);
            let f = counter::with_component(Component::FeedForward, || {
                let g = project(&h, &b.w_gate, t);
                let u = project(&h, &b.w_up, t);
                project(&kernels::swiglu_forward(&g, &u), &b.w_down, t)
            });
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += *fi;
            }
        }
        cache.len += t;
        let (out, _) = kernels::rms_norm_forward(&x, self.final_norm.data(), d, RMS_EPS);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "decoder" });
        }
        Ok(out)
    }

    fn head_last(&self, hidden: &[T]) -> Vec<T> {
        let d = self.config.d_model;
        let last = &hidden[hidden.len() - d..];
        let v = self.config.vocab_size;
        let mut logits = vec![T::zero(); v];
        counter::with_component(Component::LmHead, || {
            kernels::matmul_into(last, self.embedding.data(), &mut logits, 1, d, v, false, true, false);
        });
        logits
    }

    /// Feeds `[prefix; embed(ids)]` into the cache; returns the logits of the
    /// last position.
    pub fn prefill(&self, cache: &mut KvCache<T>, prefix: Option<&Tensor<T>>, ids: &[TokenId]) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let mut x = Vec::new();
        if let Some(p) = prefix {
            if p.rank() != 2 || p.cols() != d {
                return Err(Error::Dimension {
                    op: "prefix",
                    lhs: p.shape().to_vec(),
                    rhs: vec![p.rows(), d],
                });
            }
            x.extend_from_slice(p.data());
        }
        x.extend(self.embed_rows(ids)?);
        if x.is_empty() {
            return Err(Error::Usage("prefill needs at least one input position".into()));
        }
        let h = self.extend(cache, x, None)?;
        Ok(self.head_last(&h))
    }

    /// Appends one token; returns the logits at its position.
    pub fn decode_step(&self, cache: &mut KvCache<T>, id: TokenId) -> Result<Vec<T>> {
        let x = self.embed_rows(&[id])?;
        let h = self.extend(cache, x, None)?;
        Ok(self.head_last(&h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    /// Stop after emitting this token (it is included in the output).
    pub stop_token: Option<TokenId>,
}

impl GenerateOptions {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerateOptions {
            max_new_tokens,
            sampling: Sampling::Greedy,
            stop_token: None,
        }
    }

    pub fn stop_at(mut self, token: TokenId) -> Self {
        self.stop_token = Some(token);
        self
    }
}

fn argmax<T: Float>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Float>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|v| ((v.as_f64() - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Autoregressive continuation of `[prefix; prompt]` using the KV cache.
pub fn generate<T: Float>(
    model: &DecoderModel<T>,
    prefix: Option<&Tensor<T>>,
    prompt: &[TokenId],
    opts: &GenerateOptions,
) -> Result<Vec<TokenId>> {
    let mut rng = match opts.sampling {
        Sampling::Temperature { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Sampling::Greedy => None,
    };
    let mut out = Vec::with_capacity(opts.max_new_tokens);
    if opts.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut cache = KvCache::new(model);
    let mut logits = model.prefill(&mut cache, prefix, prompt)?;
    loop {
        let next = match (&opts.sampling, rng.as_mut()) {
            (Sampling::Temperature { temperature, .. }, Some(r)) => sample(&logits, *temperature, r),
            _ => argmax(&logits),
        } as TokenId;
        out.push(next);
        if out.len() == opts.max_new_tokens || opts.stop_token == Some(next) {
            return Ok(out);
        }
        logits = model.decode_step(&mut cache, next)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::DecoderConfig;

    fn model(seed: u64) -> DecoderModel<f32> {
        let cfg = DecoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 270,
            max_seq_len: 32,
            rope_base: 10_000.0,
        };
        DecoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_new_tokens_is_empty() {
        let m = model(1);
        assert!(generate(&m, None, &[1, 2], &GenerateOptions::greedy(0)).unwrap().is_empty());
    }

    #[test]
    fn empty_input_is_usage_error() {
        let m = model(1);
        assert!(matches!(
            generate(&m, None, &[], &GenerateOptions::greedy(3)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn window_exhaustion_is_reported() {
        let m = model(1);
        let prompt = vec![7u32; 30];
        assert!(generate(&m, None, &prompt, &GenerateOptions::greedy(3)).is_ok());
        assert!(matches!(
            generate(&m, None, &prompt, &GenerateOptions::greedy(4)),
            Err(Error::SequenceLength { len: 33, max: 32 })
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let m = model(2);
        let opts = |seed| GenerateOptions {
            max_new_tokens: 10,
            sampling: Sampling::Temperature { temperature: 1.5, seed },
            stop_token: None,
        };
        let a = generate(&m, None, &[3, 4], &opts(9)).unwrap();
        assert_eq!(a, generate(&m, None, &[3, 4], &opts(9)).unwrap());
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn stop_token_ends_generation() {
        let m = model(3);
        let free = generate(&m, None, &[5], &GenerateOptions::greedy(5)).unwrap();
        let stopped = generate(&m, None, &[5], &GenerateOptions::greedy(5).stop_at(free[1])).unwrap();
        let cut = free.iter().position(|&t| t == free[1]).unwrap();
        assert_eq!(stopped, free[..=cut].to_vec());
    }
}
