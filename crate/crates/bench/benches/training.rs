use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dgcrn_bench::fixture;
use dgcrn_core::data::{Sentinel, Split};
use dgcrn_core::training::{evaluate_model, train_step, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn train_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    // (nodes, hidden, embedding, batch): desk scale and full width.
    for (n, h, e, b) in [(20, 16, 8, 32), (20, 64, 40, 8)] {
        let mut f = fixture(n, h, e, b).unwrap();
        // Full horizon from the first iteration.
        let cfg = TrainConfig {
            step_size: 1,
            ..TrainConfig::default()
        };
        g.throughput(Throughput::Elements(b as u64));
        g.bench_with_input(BenchmarkId::from_parameter(format!("n{n}_h{h}_e{e}_b{b}")), &b, |bch, _| {
            let mut state = TrainState::new(&f.model, &cfg);
            state.iter = 100;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            bch.iter(|| {
                let out = train_step(&f.batch, 0, &mut state, &mut f.model, &f.graph, &cfg, f.data.norm, &mut rng);
                black_box(out.unwrap())
            })
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let f = fixture(20, 16, 8, 1).unwrap();
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    g.bench_function("val_split_n20_h16", |bch| {
        bch.iter(|| black_box(evaluate_model(&f.model, &f.data, &f.graph, Split::Val, 64, Sentinel::Zero).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, train_steps, evaluation);
criterion_main!(benches);
