//! Compares the data-parallel execution helpers against their sequential
//! fallbacks on the two hot paths: batch scoring and grid classification.

use buzzlab::dataio::synth_blobs;
use buzzlab::exec;
use buzzlab::models::{self, NetworkSpec, TrainConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_exec(c: &mut Criterion) {
    let data = synth_blobs(2, 60, 10, 1).expect("fixture");
    let spec = NetworkSpec::small_preset((10, 10, 1), 2);
    let cfg = TrainConfig { epochs: 1, batch_size: 32, seed: 1, ..Default::default() };
    let model = models::train(&spec, &data, &cfg).expect("trained fixture");
    let images = &data.images[..64];

    let mut group = c.benchmark_group("batch_scoring");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map(images, |x| model.score(x).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_seq(images, |x| model.score(x).unwrap()))
    });
    group.finish();

    let base = &data.images[0];
    let grad = model.loss_input_grad(base, data.labels[0]).expect("gradient");
    let n = 256usize;
    let mut group = c.benchmark_group("grid_classification");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            exec::map_indexed(n, |i| {
                let t = (i as f64 / n as f64 - 0.5) * 0.2;
                let probe = base.map(|v| v + t).clamped(-0.5, 0.5);
                let _ = grad.len();
                model.label(&probe).unwrap()
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            exec::map_indexed_seq(n, |i| {
                let t = (i as f64 / n as f64 - 0.5) * 0.2;
                let probe = base.map(|v| v + t).clamped(-0.5, 0.5);
                model.label(&probe).unwrap()
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_exec);
criterion_main!(benches);
