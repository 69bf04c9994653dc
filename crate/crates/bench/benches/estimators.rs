use cmvae_bench::{batch, mixed, model};
use cmvae_core::estimators::{estimate, EstimatorSpec};
use cmvae_core::pipeline::pmi_tuples;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn joint_estimators(c: &mut Criterion) {
    let m = model();
    let x = batch(64);
    let mut group = c.benchmark_group("joint estimate, 64 tuples");
    for spec in [EstimatorSpec::elbo(30), EstimatorSpec::iwae(30), EstimatorSpec::cubo(30)] {
        group.bench_with_input(BenchmarkId::from_parameter(spec), &spec, |b, &spec| {
            b.iter(|| estimate(&m, black_box(&x), spec, 7).unwrap())
        });
    }
    group.finish();
}

fn pmi_scoring(c: &mut Criterion) {
    let m = model();
    let ds = mixed(200, 5);
    c.bench_function("pmi, 1000 mixed tuples, K=30", |b| b.iter(|| pmi_tuples(&m, black_box(&ds), 30, 1).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = joint_estimators, pmi_scoring
}
criterion_main!(benches);
