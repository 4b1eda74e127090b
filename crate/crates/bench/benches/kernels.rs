use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use matsae_bench::{gaussian_batch, model, random_codes};
use matsae_core::retrieval::{self, RetrievalIndex};
use matsae_core::sae;
use matsae_core::store::format::EmbBlock;
use std::hint::black_box;

fn batch_topk(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_topk");
    for &(b, dict) in &[(256, 1024), (2048, 1024), (256, 8192)] {
        let (cfg, _) = model(4, vec![dict / 4, dict], vec![10, 40], 0);
        let z = gaussian_batch(b, dict, 1);
        group.throughput(Throughput::Elements((b * dict) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{b}x{dict}")), &z, |bench, z| {
            bench.iter(|| sae::batch_topk(black_box(z.view()), 2, &cfg).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(20);
    for &(d, dict, b) in &[(64, 256, 256), (256, 1024, 256), (1536, 2048, 64)] {
        let (cfg, params) = model(d, vec![dict / 4, dict], vec![8, 32], 2);
        let x = gaussian_batch(b, d, 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("d{d}_D{dict}_B{b}")), &x, |bench, x| {
            bench.iter(|| sae::backward(&params, black_box(x.view()), &cfg).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieval");
    for &n in &[1_000, 10_000] {
        let width = 2048;
        let codes = random_codes(n, width, 40, 4);
        let fps: Vec<_> = codes.iter().map(|code| retrieval::fingerprint(code, 20)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:06}")).collect();
        let dense = EmbBlock {
            d: 2,
            n,
            data: (0..n).flat_map(|i| [1.0, i as f32]).collect(),
        };
        let index = RetrievalIndex::new(ids, fps, dense).unwrap();
        let query = index.fingerprints()[0].truncate(5);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("fingerprint_k5", n), &index, |bench, index| {
            bench.iter(|| retrieval::retrieve(black_box(&query), index, 5, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_topk, forward_backward, retrieval);
criterion_main!(benches);
