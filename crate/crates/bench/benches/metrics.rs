use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nes2net_core::metrics::{compute_cllr, compute_eer, compute_min_dcf, DcfParams, Key, ScoreSet, Trial};
use nes2net_core::rng::rng_for;
use rand::Rng;

fn trials(n: usize) -> ScoreSet {
    let mut rng = rng_for(7, "bench.trials");
    let t = (0..n)
        .map(|i| {
            let bona = i % 3 == 0;
            let score = rng.random_range(-2.0..2.0) + if bona { 1.0 } else { -1.0 };
            let (key, attack) = if bona { (Key::Bonafide, "-".to_string()) } else { (Key::Spoof, format!("A{:02}", i % 7)) };
            Trial::new(format!("t{i}"), attack, key, score)
        })
        .collect();
    ScoreSet::new(t).unwrap()
}

fn metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    for n in [1_000, 100_000] {
        let set = trials(n);
        group.bench_with_input(BenchmarkId::new("eer", n), &set, |b, s| b.iter(|| compute_eer(s).unwrap()));
        group.bench_with_input(BenchmarkId::new("min_dcf", n), &set, |b, s| {
            b.iter(|| compute_min_dcf(s, DcfParams::default()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("cllr", n), &set, |b, s| b.iter(|| compute_cllr(s).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, metrics);
criterion_main!(benches);
