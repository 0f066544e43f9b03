use bimii_bench::fixture;
use bimii_core::graph::{Graph, Mode};
use bimii_core::model::AWL_PARAM;
use bimii_core::optim::AdamW;
use bimii_core::supervision::{awl_total, compute_losses};
use bimii_core::train::train_step;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward(c: &mut Criterion) {
    let fx = fixture(1).unwrap();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for t in [1, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("T{t}")), &t, |b, &t| {
            b.iter(|| {
                let mut g = Graph::new(&fx.store, Mode::Eval);
                let rgb = g.constant(fx.batch.rgb.clone());
                let th = g.constant(fx.batch.thermal.clone());
                fx.net.forward(&mut g, rgb, th, t).unwrap().logits()
            })
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let fx = fixture(2).unwrap();
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for t in [1, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("T{t}")), &t, |b, &t| {
            b.iter(|| {
                let mut g = Graph::new(&fx.store, Mode::Train);
                let rgb = g.constant(fx.batch.rgb.clone());
                let th = g.constant(fx.batch.thermal.clone());
                let out = fx.net.forward(&mut g, rgb, th, t).unwrap();
                let losses = compute_losses(&mut g, &out.decoder, &fx.batch.targets, fx.cfg.model.n_classes).unwrap();
                let s = g.param(AWL_PARAM).unwrap();
                let total = awl_total(&mut g, &losses, s, &fx.cfg.model.ablation).unwrap();
                g.backward(total).unwrap().named(&fx.store)
            })
        });
    }
    group.finish();
}

fn optimizer_step(c: &mut Criterion) {
    let fx = fixture(2).unwrap();
    let mut store = fx.store.clone();
    let mut opt = AdamW::new(&store, fx.cfg.optim.clone());
    let stage = fx.cfg.stage1.clone();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("stage1", |b| {
        b.iter(|| train_step(&fx.net, &mut store, &mut opt, &fx.batch, &stage).unwrap().total)
    });
    group.finish();
}

criterion_group!(benches, forward, forward_backward, optimizer_step);
criterion_main!(benches);
