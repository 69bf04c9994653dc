use cmvae_bench::{batch, model, trainer};
use cmvae_core::numerics::Tape;
use cmvae_core::objective::{draw_negatives, final_objective_on, ObjectiveConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn objective_and_gradient(c: &mut Criterion) {
    let m = model();
    let x = batch(64);
    let mut group = c.benchmark_group("objective + backward, batch 64");
    for (name, cfg) in [
        ("baseline", ObjectiveConfig::baseline(30)),
        ("cI", ObjectiveConfig::contrastive_iwae(2.0, 5, 30)),
        ("cC", ObjectiveConfig::contrastive_cubo(2.0, 5, 30)),
    ] {
        let neg = draw_negatives(64, 2, cfg.num_negatives, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| {
                let tape = Tape::new();
                let p = m.params().bind(&tape);
                let v = final_objective_on(&m, &p, &x, &neg, cfg, 3).unwrap();
                tape.backward(v.loss).unwrap()
            })
        });
    }
    group.finish();
}

fn adam_step(c: &mut Criterion) {
    let mut t = trainer();
    c.bench_function("training step, cI defaults", |b| b.iter(|| t.step().unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = objective_and_gradient, adam_step
}
criterion_main!(benches);
