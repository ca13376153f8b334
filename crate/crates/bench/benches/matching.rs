//! Exhaustive vs. block-partitioned patch matching across grid sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use refsr_bench::feature_map;
use refsr_core::matching::{match_features, tiled_match};

fn bench_matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("match");
    group.sample_size(10);
    for &g in &[16usize, 24, 32] {
        let q = feature_map(10, 16, g, g);
        let r = feature_map(11, 16, g, g);
        group.bench_with_input(BenchmarkId::new("full", g), &(q.clone(), r.clone()), |b, (q, r)| {
            b.iter(|| match_features(q, r).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("tiled", g), &(q, r), |b, (q, r)| {
            b.iter(|| tiled_match(q, r, 8, 4).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matching);
criterion_main!(benches);
