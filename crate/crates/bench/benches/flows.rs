use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use moflow_bench::{batch, qm9_model, rng};
use moflow_core::layers::FlowLayer;
use moflow_core::numerics::{Ctx, Mode};

fn bond_flow(c: &mut Criterion) {
    let model = qm9_model();
    let b = batch(&model, 32);
    let padded = moflow_core::bondflow::pad_bonds(&b.bonds, model.net.bond.padded);
    let mut group = c.benchmark_group("bond flow");
    group.sample_size(20);
    group.bench_function("forward b=32", |bench| {
        bench.iter(|| {
            let mut ctx = Ctx::frozen(&model.store);
            let x = ctx.constant(padded.clone());
            model.net.bond.forward(&mut ctx, x).unwrap()
        })
    });
    group.bench_function("forward+backward b=32", |bench| {
        bench.iter(|| {
            let mut ctx = Ctx::with_grads(&model.store, Mode::Frozen);
            let x = ctx.constant(padded.clone());
            let (z, ld) = model.net.bond.forward(&mut ctx, x).unwrap();
            let s = ctx.g.sum(z);
            let l = ctx.g.sum(ld);
            let total = ctx.g.add(s, l).unwrap();
            ctx.g.backward(total).unwrap()
        })
    });
    group.finish();
}

fn nll_gradient(c: &mut Criterion) {
    let model = qm9_model();
    let b = batch(&model, 32);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("nll forward+backward b=32", |bench| {
        bench.iter(|| {
            let mut ctx = Ctx::with_grads(&model.store, Mode::Frozen);
            let l = model.net.nll(&mut ctx, &b).unwrap();
            ctx.g.backward(l).unwrap()
        })
    });
    group.bench_function("sample+decode 64", |bench| {
        bench.iter_batched(
            || model.sample_prior(64, 0.85, &mut rng(4)),
            |zs| model.decode(&zs, true).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bond_flow, nll_gradient);
criterion_main!(benches);
