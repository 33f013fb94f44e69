use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use toib_core::data::{gen_synthetic, BatchSampler, GenSpec, Split};
use toib_core::nn::{ClubNet, InitScheme, Network};
use toib_core::objectives::{vclub_pair, ClassPartition};
use toib_core::rng::{standard_normal, substream};
use toib_core::training::{RunState, TrainConfig};
use toib_core::Tape;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let mut rng = substream(0, "bench/matmul");
        let a = standard_normal(&mut rng, &[64, n]);
        let b = standard_normal(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let av = tape.leaf(a.clone());
                let bv = tape.leaf(b.clone());
                let y = tape.matmul(av, bv).unwrap();
                let s = tape.sum(y, None).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.grad(av).is_some())
            })
        });
    }
    group.finish();
}

fn vclub(c: &mut Criterion) {
    let mut group = c.benchmark_group("vclub_pair");
    for v in [32usize, 64, 128] {
        let mut rng = substream(0, "bench/vclub");
        let mut net = ClubNet::new(16, 4, 64);
        net.init_params(&mut rng, InitScheme::XavierUniform);
        let z_i = standard_normal(&mut rng, &[v, 16]);
        let z_j = standard_normal(&mut rng, &[v, 16]);
        let part = ClassPartition::from_classes(&(0..v).map(|r| r % 4).collect::<Vec<_>>());
        group.bench_with_input(BenchmarkId::from_parameter(v), &v, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape, true);
                let zi = tape.constant(z_i.clone());
                let zj = tape.constant(z_j.clone());
                let t = vclub_pair(&mut tape, &net, &bound, zi, zj, &part).unwrap();
                tape.backward(t.estimate).unwrap();
                black_box(tape.value(t.estimate).item())
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for n_users in [2usize, 3] {
        let spec = GenSpec { n_per_user: 512, ..GenSpec::default() };
        let data = gen_synthetic(&spec, n_users, Split::Train).unwrap();
        let cfg = TrainConfig { n_users, ..TrainConfig::default() };
        let sampler = BatchSampler::new(&data, cfg.batch_size, cfg.label_mode).unwrap();
        let mut state = RunState::new(&cfg, spec.input_dim, spec.n_classes).unwrap();
        group.bench_with_input(BenchmarkId::new("users", n_users), &n_users, |bench, _| {
            bench.iter(|| black_box(state.step_once(&cfg, &sampler).unwrap().loss.total))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, vclub, train_step);
criterion_main!(benches);
