use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gibbs_mple::{erode, PseudoLikelihood, QuadratureScheme};
use gibbs_mple_bench::{lj_pattern, lj_spec, lj_theta};

fn evaluate(c: &mut Criterion) {
    let spec = lj_spec();
    let theta = lj_theta();
    let mut group = c.benchmark_group("log_pl");
    group.sample_size(10);
    for side in [4.0, 8.0] {
        let cfg = lj_pattern(side + 1.0, 7);
        let est = erode(cfg.window(), 0.5).unwrap();
        let quad = QuadratureScheme::default_for(&spec, &est).unwrap();
        let pl = PseudoLikelihood::new(&cfg, &spec, &est, &quad, None).unwrap();
        group.bench_with_input(BenchmarkId::new("value", side), &pl, |b, pl| {
            b.iter(|| pl.value(&theta).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("with_hessian", side), &pl, |b, pl| {
            b.iter(|| pl.evaluate(&theta, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, evaluate);
criterion_main!(benches);
