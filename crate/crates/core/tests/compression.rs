use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squidlet::compression::{augment_context, encode_context, Activation, MemoryEmbedding, Projector, Pipeline, PipelineConfig};
use squidlet::Tensor;

fn pipeline(n: usize) -> Pipeline<f32> {
    Pipeline::new(PipelineConfig::toy(n), 11).unwrap()
}

#[test]
fn shape_contracts_hold_for_random_lengths() {
    let s = pipeline(8);
    let tok = *s.tokenizer();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..25 {
        let l = rng.gen_range(1..=256);
        let n = rng.gen_range(1..=64);
        let ctx: Vec<u32> = (0..l).map(|_| rng.gen_range(0..256)).collect();
        let aug = augment_context(&tok, &ctx, n, 1024).unwrap();
        assert_eq!(aug.len(), l + n);
        assert_eq!(&aug[..l], &ctx[..]);
        let z = s.encoder.forward_hidden(&aug).unwrap();
        assert_eq!(z.shape(), &[l + n, 64]);
        let m = encode_context(&s.encoder, &tok, &aug, n).unwrap();
        assert_eq!(m.0, z.slice_rows(l, n).unwrap());
        let (m2, e) = s.compress_with(&ctx, n).unwrap();
        assert_eq!(m2, m);
        assert_eq!(e.0.shape(), &[n, 128]);
    }
}

#[test]
fn every_memory_row_sees_the_first_token() {
    let s = pipeline(8);
    let ctx: Vec<u32> = (0..40).map(|i| (i * 13 % 256) as u32).collect();
    let (m, _) = s.compress(&ctx).unwrap();
    assert_eq!(m.0.shape(), &[8, 64]);
    let mut changed = ctx.clone();
    changed[0] = 200;
    let (m2, _) = s.compress(&changed).unwrap();
    for r in 0..8 {
        assert_ne!(m.0.row(r), m2.0.row(r), "memory row {r} ignored c_1");
    }
}

#[test]
fn projector_is_row_permutation_equivariant() {
    let p = Projector::<f32>::new(64, 128, 128, Activation::Gelu, &mut ChaCha8Rng::seed_from_u64(2));
    let m = Tensor::<f32>::randn(&[8, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let e = p.project(&MemoryEmbedding(m.clone())).unwrap();
    assert_eq!(e.0.shape(), &[8, 128]);
    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
    let rows: Vec<f32> = perm.iter().flat_map(|&r| m.row(r).to_vec()).collect();
    let pe = p.project(&MemoryEmbedding(Tensor::new(vec![8, 64], rows).unwrap())).unwrap();
    for (i, &r) in perm.iter().enumerate() {
        assert_eq!(pe.0.row(i), e.0.row(r));
    }
}

#[test]
fn overlong_context_is_rejected_not_truncated() {
    let s = pipeline(16);
    let ctx = vec![65u32; 513];
    assert!(matches!(
        s.compress(&ctx),
        Err(squidlet::Error::Truncation { len: 513, memory: 16, .. })
    ));
    assert!(s.compress(&ctx[..512]).is_ok());
}
