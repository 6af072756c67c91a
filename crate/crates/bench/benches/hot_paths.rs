use advmos_bench::fixture_clip;
use advmos_core::attack::{attack_objective, target_from_score};
use advmos_core::diff::{Graph, Tensor};
use advmos_core::spectral::StftPlan;
use advmos_core::{PredictorModel, StftConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn stft(c: &mut Criterion) {
    let plan = StftPlan::new(StftConfig::default()).unwrap();
    let mut group = c.benchmark_group("stft");
    for seconds in [0.5, 2.0] {
        let x = fixture_clip(seconds);
        group.bench_function(format!("{seconds}s"), |b| b.iter(|| plan.stft(black_box(&x)).unwrap()));
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let model = PredictorModel::init(0).unwrap();
    let x = fixture_clip(0.5);
    c.bench_function("predict/0.5s", |b| b.iter(|| model.predict(black_box(&x)).unwrap()));
}

fn attack_step(c: &mut Criterion) {
    let model = PredictorModel::init(0).unwrap();
    let x = fixture_clip(0.5);
    let cfg = advmos_core::AttackConfig::default();
    let target = target_from_score(model.predict(&x).unwrap()).unwrap();
    let latent = Tensor::vector((0..x.len()).map(|i| 0.01 * ((i % 17) as f64 - 8.0)).collect()).unwrap();
    c.bench_function("attack_step/0.5s", |b| {
        b.iter_batched(
            || latent.clone(),
            |z0| {
                let mut g = Graph::new();
                let z = g.leaf(z0);
                let nodes = attack_objective(&mut g, &model, &x, z, target, &cfg).unwrap();
                g.backward(nodes.objective).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = stft, predict, attack_step
}
criterion_main!(benches);
