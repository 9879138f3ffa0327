use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlign_core::encoder::{EncoderConfig, TextEncoder};
use xlign_core::eval::recall_at_k;
use xlign_core::model::Model;
use xlign_core::objective::info_nce;
use xlign_core::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

// x · (A ⊗ B), fused versus materializing the Kronecker product first.
fn kron(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[48, 32], 1.0, &mut rng);
    let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[8, 1], 1.0, &mut rng);
    let mut group = c.benchmark_group("kron_matmul");
    group.bench_function("fused", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, av, bv) = (tape.constant(x.clone()), tape.constant(a.clone()), tape.constant(b.clone()));
            black_box(tape.kron_matmul(xv, av, bv).unwrap())
        })
    });
    group.bench_function("dense", |bench| {
        bench.iter(|| black_box(x.matmul(&a.kron(&b).unwrap()).unwrap()))
    });
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::frozen(TextEncoder::new(EncoderConfig::default(), &mut rng).unwrap());
    let texts: Vec<Vec<u32>> = (0..32u32).map(|i| (0..16).map(|j| 9 + (i * 16 + j) % 1000).collect()).collect();
    c.bench_function("encode_32x16", |bench| bench.iter(|| black_box(model.encode_texts(&texts).unwrap())));
}

fn infonce(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn(&[64, 16], 1.0, &mut rng);
    let b = Tensor::randn(&[64, 16], 1.0, &mut rng);
    c.bench_function("info_nce_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (av, bv) = (tape.param(a.clone()), tape.param(b.clone()));
            let loss = info_nce(&mut tape, av, bv, 0.05).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn recall(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sim = Tensor::randn(&[500, 500], 1.0, &mut rng);
    let truth: Vec<usize> = (0..500).collect();
    c.bench_function("recall_at_5_500", |bench| bench.iter(|| black_box(recall_at_k(&sim, &truth, 5).unwrap())));
}

criterion_group!(benches, matmul, kron, encoder_forward, infonce, recall);
criterion_main!(benches);
