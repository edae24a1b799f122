use squidlet::compression::{Pipeline, PipelineConfig, Trainable};
use squidlet::data::{generate_synthetic, split_for_continual, Corpus, SyntheticProfile};
use squidlet::tokenizer::TokenId;
use squidlet::training::{
    batch_gradients, decode_checkpoint, encode_checkpoint, evaluate_loss, train, train_for, Example, Stage,
    StageConfig, TrainState,
};
use squidlet::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(n: usize) -> PipelineConfig {
    let mut c = PipelineConfig::toy(n);
    c.encoder.d_model = 32;
    c.encoder.n_layers = 2;
    c.encoder.n_heads = 2;
    c.encoder.d_ff = 96;
    c.decoder.d_model = 48;
    c.decoder.n_layers = 2;
    c.decoder.n_heads = 4;
    c.decoder.d_ff = 144;
    c.d_proj = 48;
    c
}

fn small_state(seed: u64) -> TrainState {
    TrainState::new(Pipeline::new(small_config(4), seed).unwrap())
}

fn corpus(n: usize, seed: u64) -> Corpus {
    generate_synthetic(seed, n, &SyntheticProfile::default())
}

fn cfg(stage: Stage, steps: usize, seed: u64) -> StageConfig {
    let mut c = StageConfig::new(stage, steps, seed);
    c.batch_size = 4;
    c
}

fn snapshot(m: &Pipeline<f32>) -> Vec<(String, Vec<u32>)> {
    m.params()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn initial_loss_is_near_uniform() {
    let model = Pipeline::new(PipelineConfig::toy(16), 3).unwrap();
    let c = corpus(8, 1);
    let tok = model.tokenizer();
    let ex: Vec<Example> = c
        .samples
        .iter()
        .map(|s| Example::restoration(&tok.encode(&s.context), 16).unwrap())
        .collect();
    let loss = evaluate_loss(&model, &ex).unwrap() as f64;
    let uniform = (model.config().decoder.vocab_size as f64).ln();
    assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
}

#[test]
fn masked_targets_do_not_affect_loss_or_gradients() {
    let model = small_state(5).model;
    let ctx: Vec<TokenId> = (0..30).map(|i| 40 + i).collect();
    let q: Vec<TokenId> = b"who?".iter().map(|&b| b as TokenId).collect();
    let r: Vec<TokenId> = b"them".iter().map(|&b| b as TokenId).collect();
    let ex = Example::instruction(&ctx, &q, &r, 4).unwrap();
    let mut other = ex.clone();
    for (t, &m) in other.targets.iter_mut().zip(&ex.mask) {
        if !m {
            *t = 7;
        }
    }
    assert_ne!(ex.targets, other.targets);
    let (la, ga) = batch_gradients(&model, &[ex], Trainable::default()).unwrap();
    let (lb, gb) = batch_gradients(&model, &[other], Trainable::default()).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn continual_memory_ignores_the_second_segment() {
    let model = small_state(6).model;
    let ctx: Vec<TokenId> = (0..60).map(|i| (i * 7 % 256) as TokenId).collect();
    let (c1, c2) = split_for_continual(&ctx, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ex = Example::continual(&c1, &c2, 4).unwrap();
    assert_eq!(ex.context, c1);
    let (_, e1) = model.compress(&ex.context).unwrap();
    let mut c2b = c2.clone();
    c2b.iter_mut().for_each(|t| *t = (*t + 1) % 256);
    let ex2 = Example::continual(&c1, &c2b, 4).unwrap();
    let (_, e2) = model.compress(&ex2.context).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn frozen_groups_are_bitwise_unchanged() {
    let c = corpus(8, 2);
    for (frozen, prefix) in [
        (Trainable { encoder: false, projector: true, decoder: true }, "pi_s."),
        (Trainable { encoder: true, projector: false, decoder: true }, "projector."),
        (Trainable { encoder: true, projector: true, decoder: false }, "pi_l."),
    ] {
        let mut state = small_state(7);
        let before = snapshot(&state.model);
        let mut sc = cfg(Stage::Restoration, 3, 1);
        sc.trainable = frozen;
        train(&mut state, &sc, &c).unwrap();
        let after = snapshot(&state.model);
        let mut moved = false;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.starts_with(prefix) {
                assert_eq!(a, b, "{name} changed while frozen");
            } else {
                moved |= a != b;
            }
        }
        assert!(moved, "nothing trained with {prefix} frozen");
    }
}

#[test]
fn same_seed_gives_identical_loss_history() {
    let c = corpus(12, 3);
    let run = || {
        let mut s = small_state(8);
        train(&mut s, &cfg(Stage::Continual, 5, 42), &c).unwrap();
        s.loss_history.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let c = corpus(8, 4);
    let mut s = small_state(9);
    train_for(&mut s, &cfg(Stage::Restoration, 6, 1), &c, 3).unwrap();
    let bytes = encode_checkpoint(&s);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back.stage_step, 3);
    assert_eq!(back.model, s.model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.sqd");
    squidlet::training::save_checkpoint(&s, &path).unwrap();
    let loaded = squidlet::training::load_checkpoint(&path).unwrap();
    assert_eq!(encode_checkpoint(&loaded), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&small_state(10));
    let mut flipped = bytes.clone();
    let at = flipped.len() / 2;
    flipped[at] ^= 0x40;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));

    let mut versioned = bytes.clone();
    versioned[4] = 2;
    assert!(matches!(decode_checkpoint(&versioned), Err(Error::Version { found: 2, expected: 1 })));

    assert!(matches!(decode_checkpoint(b"nope, not a checkpoint"), Err(Error::Format(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let c = corpus(10, 5);
    let sc = cfg(Stage::Instruction, 10, 77);
    let mut whole = small_state(11);
    train(&mut whole, &sc, &c).unwrap();

    let mut first = small_state(11);
    assert_eq!(train_for(&mut first, &sc, &c, 4).unwrap(), 4);
    let mut resumed = decode_checkpoint(&encode_checkpoint(&first)).unwrap();
    assert_eq!(train_for(&mut resumed, &sc, &c, usize::MAX).unwrap(), 6);

    assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&whole));
    assert_eq!(resumed.completed, vec![Stage::Instruction]);
}

#[test]
fn oversized_sample_fails_with_its_index() {
    let mut c = corpus(4, 6);
    c.samples[2].context = "x".repeat(600);
    let mut sc = cfg(Stage::Restoration, 1, 1);
    sc.batch_size = 4;
    let err = train(&mut small_state(12), &sc, &c).unwrap_err();
    let Error::Step { step: 0, source } = &err else { panic!("{err}") };
    let msg = source.to_string();
    assert!(msg.contains("sample 2"), "{msg}");
}

fn loss_drop(stage: Stage, steps: usize) -> (f32, f32) {
    let c = corpus(8, 7);
    let mut s = small_state(13);
    let mut sc = cfg(stage, steps, 3);
    sc.batch_size = 8;
    sc.lr = 3e-3;
    train(&mut s, &sc, &c).unwrap();
    let h = &s.loss_history;
    let tail = h[h.len() - 10..].iter().sum::<f32>() / 10.0;
    (h[0], tail)
}

#[test]
fn restoration_loss_halves_on_a_small_set() {
    let (first, last) = loss_drop(Stage::Restoration, 200);
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn continual_loss_drops_on_a_small_set() {
    let (first, last) = loss_drop(Stage::Continual, 200);
    assert!(last <= 0.7 * first, "{first} -> {last}");
}

#[test]
fn zeroed_memory_hurts_a_trained_restorer() {
    let c = corpus(8, 8);
    let mut s = small_state(14);
    let mut sc = cfg(Stage::Restoration, 150, 3);
    sc.batch_size = 8;
    sc.lr = 3e-3;
    train(&mut s, &sc, &c).unwrap();
    let tok = *s.model.tokenizer();
    let ex: Vec<Example> = c
        .samples
        .iter()
        .map(|x| Example::restoration(&tok.encode(&x.context), 4).unwrap())
        .collect();
    let with_memory = evaluate_loss(&s.model, &ex).unwrap();
    // an all-zero projector output leaves the decoder with no context
    let mut blind = s.model.clone();
    for t in blind.projector.params_mut().into_iter().skip(2) {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let without = evaluate_loss(&blind, &ex).unwrap();
    assert!(without > with_memory + 0.1, "{with_memory} vs {without}");
}
