//! Finite-difference gradient cases shared by the gradcheck tests and the
//! acceptance run. Each returns `(label, worst relative error)` pairs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use squidlet::tensor::kernels::RopeTable;
use squidlet::transformer::{DecoderConfig, DecoderModel, DecoderVars};
use squidlet::{Tape, Tensor, Var};

use super::check;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces `x` to a scalar through fixed random weights so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> squidlet::Result<Var> {
    let w = tape.leaf(rand(tape.value(x).shape(), seed));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

pub fn matmul_and_transposed_matmul() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let err = check(&[rand(&[3, 4], 1), rand(&[4, 5], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    out.push(("matmul", err));
    let err = check(&[rand(&[3, 4], 1), rand(&[6, 4], 2)], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    out.push(("matmul_nt", err));
    out
}

pub fn elementwise_ops() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let err = check(&[rand(&[3, 4], 1), rand(&[3, 4], 2), rand(&[4], 3)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[0])?;
        let s = t.scale(m, 0.7)?;
        let b = t.add_bias(s, v[2])?;
        weighted_sum(t, b, 4)
    });
    out.push(("elementwise", err));
    out
}

pub fn norms_and_activations() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let err = check(&[rand(&[4, 6], 1), rand(&[6], 2)], |t, v| {
        let y = t.rms_norm(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    out.push(("rms_norm", err));
    let err = check(&[rand(&[4, 6], 1)], |t, v| {
        let y = t.softmax_rows(v[0])?;
        weighted_sum(t, y, 3)
    });
    out.push(("softmax", err));
    let err = check(&[rand(&[4, 6], 1), rand(&[4, 6], 2)], |t, v| {
        let y = t.swiglu(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    out.push(("swiglu", err));
    let err = check(&[rand(&[4, 6], 1)], |t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y, 3)
    });
    out.push(("gelu", err));
    out
}

pub fn rope_and_attention() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let table = Arc::new(RopeTable::<f64>::new(4, 16, 10_000.0));
    let err = check(&[rand(&[5, 8], 1)], |t, v| {
        let y = t.rope(v[0], 2, 3, &table)?;
        weighted_sum(t, y, 2)
    });
    out.push(("rope", err));
    let err = check(&[rand(&[5, 8], 1), rand(&[5, 8], 2), rand(&[5, 8], 3)], |t, v| {
        let y = t.causal_attention(v[0], v[1], v[2], 2)?;
        weighted_sum(t, y, 4)
    });
    out.push(("attention", err));
    out
}

pub fn gather_concat_slice_and_cross_entropy() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let err = check(&[rand(&[7, 4], 1), rand(&[2, 4], 2)], |t, v| {
        let e = t.embedding(v[0], &[3, 0, 3, 6])?;
        let c = t.concat_rows(&[v[1], e])?;
        let s = t.slice_rows(c, 1, 4)?;
        weighted_sum(t, s, 3)
    });
    out.push(("gather", err));
    let err = check(&[rand(&[5, 7], 1)], |t, v| {
        t.cross_entropy(v[0], &[1, 6, 0, 2, 2], &[true, false, true, true, true])
    });
    out.push(("cross entropy", err));
    out
}

/// Moves parameters away from the near-zero init, where tiny activations
/// make norms sharply curved and central differences unreliable.
fn jitter(p: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let noise = Tensor::<f64>::randn(p.shape(), 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
    let data = p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::new(p.shape().to_vec(), data).unwrap()
}

pub fn full_decoder_loss_gradients() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let cfg = DecoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 20,
        max_seq_len: 32,
        rope_base: 10_000.0,
    };
    let model = DecoderModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(7))
        .unwrap()
        .cast::<f64>();
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .into_iter()
        .enumerate()
        .map(|(i, (_, p))| jitter(p, 100 + i as u64))
        .collect();
    inputs.push(rand(&[3, 16], 9)); // soft prefix rows
    let ids = [4u32, 11, 2, 19, 7, 7];
    let targets = [0u32, 0, 5, 11, 2, 19, 7, 7, 3];
    let mask = [false, false, true, true, true, true, true, true, true];
    let err = check(&inputs, |t, v| {
        let (params, prefix) = v.split_at(v.len() - 1);
        let vars = DecoderVars::from_slice(params)?;
        let h = model.hidden_taped(t, &vars, Some(prefix[0]), &ids)?;
        let logits = model.logits_taped(t, &vars, h)?;
        t.cross_entropy(logits, &targets, &mask)
    });
    out.push(("decoder", err));
    out
}

pub fn full_pipeline_restoration_loss_gradients() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    use squidlet::compression::{Activation, CompressionConfig, Pipeline, PipelineConfig};
    use squidlet::tokenizer::{BASE_VOCAB, RESTORE};

    let tiny = |vocab| DecoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        vocab_size: vocab,
        max_seq_len: 32,
        rope_base: 10_000.0,
    };
    let cfg = PipelineConfig {
        max_memory: 4,
        compression: CompressionConfig {
            n_memory: 2,
            max_context: 16,
        },
        encoder: tiny(BASE_VOCAB + 4),
        decoder: tiny(BASE_VOCAB),
        d_proj: 12,
        activation: Activation::Gelu,
    };
    let pipe = Pipeline::<f32>::new(cfg, 3).unwrap().cast::<f64>();
    let inputs: Vec<Tensor<f64>> = pipe
        .params()
        .into_iter()
        .enumerate()
        .map(|(i, (_, t))| jitter(t, 200 + i as u64))
        .collect();
    let ctx = [72u32, 105, 33, 10, 72];
    let err = check(&inputs, |t, v| {
        // Rebuild the grouped handles from the flat list.
        let n_enc = pipe.encoder.params().len();
        let enc = DecoderVars::from_slice(&v[..n_enc])?;
        let proj = squidlet::compression::ProjectorVars {
            w1: v[n_enc],
            b1: v[n_enc + 1],
            w2: v[n_enc + 2],
            b2: v[n_enc + 3],
        };
        let dec = DecoderVars::from_slice(&v[n_enc + 4..])?;
        let vars = squidlet::compression::PipelineVars {
            encoder: enc,
            projector: proj,
            decoder: dec,
        };
        let e = pipe.compress_taped(t, &vars, &ctx)?;
        let mut input = vec![RESTORE];
        input.extend_from_slice(&ctx[..4]);
        let h = pipe.decoder.hidden_taped(t, &vars.decoder, Some(e), &input)?;
        let logits = pipe.decoder.logits_taped(t, &vars.decoder, h)?;
        let mut targets = vec![0u32; 2];
        targets.extend_from_slice(&ctx);
        let mask = [false, false, true, true, true, true, true];
        t.cross_entropy(logits, &targets, &mask)
    });
    out.push(("pipeline", err));
    out
}

/// Every case above, primitives first.
pub fn all() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.extend(matmul_and_transposed_matmul());
    out.extend(elementwise_ops());
    out.extend(norms_and_activations());
    out.extend(rope_and_attention());
    out.extend(gather_concat_slice_and_cross_entropy());
    out.extend(full_decoder_loss_gradients());
    out.extend(full_pipeline_restoration_loss_gradients());
    out
}
