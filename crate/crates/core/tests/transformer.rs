use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squidlet::transformer::{generate, DecoderConfig, DecoderModel, GenerateOptions};
use squidlet::Tensor;

fn config(layers: usize) -> DecoderConfig {
    DecoderConfig {
        d_model: 32,
        n_layers: layers,
        n_heads: 4,
        d_ff: 48,
        vocab_size: 300,
        max_seq_len: 128,
        rope_base: 10_000.0,
    }
}

fn model<T: squidlet::Float>(layers: usize, seed: u64) -> DecoderModel<T> {
    DecoderModel::<f32>::new(config(layers), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
        .cast()
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..300)).collect()
}

#[test]
fn future_tokens_do_not_affect_past_logits() {
    let m = model::<f32>(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_ids(&mut rng, 24);
    let base = m.forward_logits(None, &ids).unwrap();
    for j in [1, 7, 23] {
        let mut changed = ids.clone();
        changed[j] = (changed[j] + 1) % 300;
        let out = m.forward_logits(None, &changed).unwrap();
        for i in 0..j {
            let same = base.row(i).iter().zip(out.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "row {i} changed when token {j} was edited");
        }
        assert_ne!(base.row(j), out.row(j));
    }
}

#[test]
fn empty_prefix_is_bitwise_identity() {
    let m = model::<f32>(2, 3);
    let ids = [5u32, 9, 250, 17];
    let none = m.forward_logits(None, &ids).unwrap();
    let empty = m.forward_logits(Some(&Tensor::zeros(&[0, 32])), &ids).unwrap();
    assert!(none.data().iter().zip(empty.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn embedding_rows_as_prefix_match_tokens() {
    let m = model::<f32>(2, 4);
    let ids = [40u32, 41, 42, 43, 44, 45];
    let rows: Vec<f32> = ids[..3].iter().flat_map(|&i| m.embedding.row(i as usize).to_vec()).collect();
    let prefix = Tensor::new(vec![3, 32], rows).unwrap();
    let a = m.forward_logits(None, &ids).unwrap();
    let b = m.forward_logits(Some(&prefix), &ids[3..]).unwrap();
    assert_eq!(a.shape(), b.shape());
    assert!(a.max_abs_diff(&b) <= 1e-6);
}

/// Straight-line reference for a single block in f64.
fn reference_logits(m: &DecoderModel<f64>, ids: &[u32]) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let t = ids.len();
    let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
    };
    let mul = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        let (k, n) = (w.shape()[0], w.shape()[1]);
        (0..n).map(|j| (0..k).map(|i| x[i] * w.data()[i * n + j]).sum()).collect()
    };
    let rope = |x: &mut [f64], pos: usize| {
        for h in 0..nh {
            for i in 0..hd / 2 {
                let theta = pos as f64 * cfg.rope_base.powf(-(2.0 * i as f64) / hd as f64);
                let (a, b) = (x[h * hd + i], x[h * hd + i + hd / 2]);
                x[h * hd + i] = a * theta.cos() - b * theta.sin();
                x[h * hd + i + hd / 2] = b * theta.cos() + a * theta.sin();
            }
        }
    };
    let b = &m.blocks[0];
    let mut xs: Vec<Vec<f64>> = ids.iter().map(|&i| m.embedding.row(i as usize).to_vec()).collect();
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    for (p, x) in xs.iter().enumerate() {
        let h = rms(x, b.attn_norm.data());
        let mut qi = mul(&h, &b.wq);
        let mut ki = mul(&h, &b.wk);
        rope(&mut qi, p);
        rope(&mut ki, p);
        q.push(qi);
        k.push(ki);
        v.push(mul(&h, &b.wv));
    }
    for i in 0..t {
        let mut attn = vec![0.0; d];
        for h in 0..nh {
            let r = h * hd..(h + 1) * hd;
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for j in 0..=i {
                let p = (scores[j] - max).exp() / z;
                for c in r.clone() {
                    attn[c] += p * v[j][c];
                }
            }
        }
        let o = mul(&attn, &b.wo);
        let x = &mut xs[i];
        for c in 0..d {
            x[c] += o[c];
        }
        let h = rms(x, b.ffn_norm.data());
        let g = mul(&h, &b.w_gate);
        let u = mul(&h, &b.w_up);
        let s: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
        let f = mul(&s, &b.w_down);
        for c in 0..d {
            x[c] += f[c];
        }
    }
    xs.iter()
        .map(|x| {
            let h = rms(x, m.final_norm.data());
            (0..cfg.vocab_size)
                .map(|r| m.embedding.row(r).iter().zip(&h).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

#[test]
fn single_block_matches_reference() {
    let tiny = DecoderConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 8,
        vocab_size: 300,
        max_seq_len: 16,
        rope_base: 10_000.0,
    };
    let models = [
        model::<f64>(1, 5),
        DecoderModel::<f32>::new(tiny, &mut ChaCha8Rng::seed_from_u64(6)).unwrap().cast(),
    ];
    let ids = [3u32, 100, 299, 0, 42, 42, 7];
    for m in &models {
        let got = m.forward_logits(None, &ids).unwrap();
        let want = reference_logits(m, &ids);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-10, "row {i}: {a} vs {b}");
            }
        }
    }
}

fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

#[test]
fn cached_generation_matches_full_recompute() {
    let m = model::<f32>(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let len = rng.gen_range(1..20);
        let prompt = random_ids(&mut rng, len);
        let cached = generate(&m, None, &prompt, &GenerateOptions::greedy(8)).unwrap();
        let mut seq = prompt.clone();
        let mut naive = Vec::new();
        for _ in 0..8 {
            let logits = m.forward_logits(None, &seq).unwrap();
            let next = argmax(logits.row(seq.len() - 1));
            naive.push(next);
            seq.push(next);
        }
        assert_eq!(cached, naive, "prompt {prompt:?}");
    }
}

#[test]
fn cached_logits_track_full_logits_with_prefix() {
    let m = model::<f32>(2, 8);
    let prefix = Tensor::<f32>::randn(&[4, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let ids = [10u32, 20, 30];
    let full = m.forward_logits(Some(&prefix), &ids).unwrap();
    let mut cache = squidlet::transformer::KvCache::new(&m);
    let last = m.prefill(&mut cache, Some(&prefix), &ids[..1]).unwrap();
    let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(diff(&last, full.row(4)) < 1e-5);
    for (i, &id) in ids[1..].iter().enumerate() {
        let step = m.decode_step(&mut cache, id).unwrap();
        assert!(diff(&step, full.row(5 + i)) < 1e-5);
    }
    assert_eq!(cache.len(), 7);
}

#[test]
fn forward_is_bitwise_repeatable() {
    let m = model::<f32>(2, 10);
    let ids = [1u32, 2, 3, 4, 5];
    let a = m.forward_hidden(&ids).unwrap();
    let b = m.forward_hidden(&ids).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
