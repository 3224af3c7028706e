//! Batch training step and ensemble inference on the default rayon pool
//! versus a single-thread pool.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cxr_core::exec;
use cxr_core::nn::build_small_cnn;
use cxr_core::snapshot::{Checkpoint, Ensemble, EnsembleInputs};
use cxr_core::TensorF32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, side: usize, seed: u64) -> Vec<TensorF32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TensorF32::new(vec![3, side, side], (0..3 * side * side).map(|_| rng.random()).collect()).unwrap())
        .collect()
}

fn pools(c: &mut Criterion, group: &str, bench: &(dyn Fn() + Sync)) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("pool", "default"), |b| b.iter(bench));
    g.bench_function(BenchmarkId::new("pool", "single"), |b| exec::sequential(|| b.iter(bench)));
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let inputs = batch(8, 32, 1);
    let mut net = build_small_cnn();
    net.init(1);
    let net = std::sync::Mutex::new(net);
    pools(c, "train_step_8x3x32x32", &|| {
        let mut n = net.lock().unwrap();
        let p = n.forward(&inputs).unwrap();
        let up: Vec<f64> = p.iter().map(|&v| v as f64 - 0.5).collect();
        black_box(n.backward(&up).unwrap());
    });
}

fn ensemble(c: &mut Criterion) {
    let inputs = batch(32, 32, 2);
    let members: Vec<Checkpoint> = (0..7)
        .map(|s| {
            let mut n = build_small_cnn();
            n.init(s);
            Checkpoint::capture(&n, s as usize + 1, 0.0, None)
        })
        .collect();
    let e = Ensemble::from_checkpoints(&members).unwrap();
    pools(c, "ensemble_7x32", &|| {
        black_box(e.predict(&EnsembleInputs { images: Some(&inputs), features: None }).unwrap());
    });
}

criterion_group!(benches, train_step, ensemble);
criterion_main!(benches);
