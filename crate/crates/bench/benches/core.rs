use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hicofore_bench::{hierarchy, mixture, network, windows};
use hicofore_core::forecaster::{loss_and_grad, Architecture};
use hicofore_core::reconcile::MinTraceWeights;
use hicofore_core::{
    build_projection, default_q_grid, reconcile_samples, scrps, ForecastSet, ScalerKind, Strategy,
};
use std::hint::black_box;

fn mixture_ops(c: &mut Criterion) {
    let m = mixture(7, 10, 12);
    let y = m.mean();
    c.bench_function("mixture/sample_1000", |b| b.iter(|| m.sample(black_box(1000), 0).unwrap()));
    c.bench_function("mixture/joint_nll", |b| b.iter(|| m.joint_nll(black_box(y.view())).unwrap()));
    c.bench_function("mixture/covariance", |b| b.iter(|| m.covariance(black_box(0))));
}

fn reconciliation(c: &mut Criterion) {
    let spec = hierarchy();
    let s = spec.summing_matrix();
    let base = mixture(7, 4, 12).sample(10_000, 1).unwrap();
    let history = windows(4, 60);
    let variances = [4.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0];
    let mut group = c.benchmark_group("reconcile/10000_samples");
    for strategy in Strategy::ALL {
        let p = build_projection(&spec, strategy, Some(history.view()), Some(&variances)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(strategy), &p, |b, p| {
            b.iter(|| reconcile_samples(&s, p, black_box(base.view()), 0).unwrap())
        });
    }
    group.finish();
    c.bench_function("reconcile/mintrace_wls_projection", |b| {
        b.iter(|| hicofore_core::reconcile::min_trace_projection(&spec, &MinTraceWeights::Wls(black_box(variances.to_vec()))).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("network/loss_and_grad");
    for kind in [ScalerKind::Robust, ScalerKind::Revin] {
        let arch = Architecture { input_len: 36, width: 64, hidden_layers: 2, n_components: 10, horizon: 12, revin: kind == ScalerKind::Revin };
        let p = network(arch);
        let w = windows(7 * 8, 36);
        let y = windows(7 * 8, 12);
        group.bench_with_input(BenchmarkId::from_parameter(kind), &kind, |b, &kind| {
            b.iter(|| loss_and_grad(&p, kind, black_box(w.view()), y.view()).unwrap())
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let spec = hierarchy();
    let grid = default_q_grid();
    let base = mixture(7, 4, 12).sample(1000, 2).unwrap();
    let p = build_projection(&spec, Strategy::BottomUp, None, None).unwrap();
    let rec = reconcile_samples(&spec.summing_matrix(), &p, base.view(), 2).unwrap();
    let forecast = ForecastSet::from_samples(spec.series_ids(), rec.clone(), &grid).unwrap();
    let y = forecast.mean();
    c.bench_function("evaluate/quantiles_1000", |b| {
        b.iter(|| ForecastSet::from_samples(spec.series_ids(), black_box(rec.clone()), &grid).unwrap())
    });
    c.bench_function("evaluate/scrps", |b| b.iter(|| scrps(&forecast, black_box(y.view())).unwrap()));
}

criterion_group!(benches, mixture_ops, reconciliation, training_step, scoring);
criterion_main!(benches);
