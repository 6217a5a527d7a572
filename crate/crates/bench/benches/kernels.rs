use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use refgame_core::autodiff::{Array, Graph, Lstm, ParamStore};
use refgame_core::rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let mut r = rng::seeded(n as u64);
        let a = Array::normal(&[32, n], 1.0, &mut r);
        let b = Array::normal(&[n, 4 * n], 1.0, &mut r);
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::train();
                let x = g.leaf(a.clone(), true);
                let w = g.leaf(b.clone(), true);
                let y = g.matmul(x, w).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(w).map(|a| a.len()))
            })
        });
    }
    group.finish();
}

fn lstm_unroll(c: &mut Criterion) {
    let mut r = rng::seeded(7);
    let lstm = Lstm::new("bench.lstm", 64, 64);
    let mut store = ParamStore::new();
    lstm.init(&mut store, &mut r).unwrap();
    let inputs: Vec<Array> = (0..10)
        .map(|_| Array::normal(&[32, 64], 1.0, &mut r))
        .collect();
    c.bench_function("lstm_unroll_10x32x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::train();
            let (mut h, mut cell) = lstm.zero_state(&mut g, 32);
            for x in &inputs {
                let x = g.constant(x.clone());
                (h, cell) = lstm.step(&mut g, &store, x, h, cell).unwrap();
            }
            let s = g.sum(h);
            g.backward(s).unwrap();
            black_box(store.gradients(&g).len())
        })
    });
}

criterion_group!(benches, matmul, lstm_unroll);
criterion_main!(benches);
