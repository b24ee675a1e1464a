use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maskprop::hac::{build_feature, nn_chain_complete};
use maskprop::synth::{generate, Scenario};

fn complete_linkage(c: &mut Criterion) {
    let mut group = c.benchmark_group("nn_chain_complete");
    group.sample_size(10);
    for n in [250, 1000, 2000] {
        let masks = generate(&Scenario { classes: 1, ..Scenario::default() }, n, 1).unwrap();
        let points: Vec<Vec<f64>> = masks.iter().map(|m| build_feature(m, 1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &points, |b, p| b.iter(|| nn_chain_complete(p)));
    }
    group.finish();
}

criterion_group!(benches, complete_linkage);
criterion_main!(benches);
