use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use skrefine_bench::{artifacts, wide};
use skrefine_core::checker::{check_all, check_validity, naive_check, CheckInputs};
use skrefine_core::synth::Preset;
use skrefine_core::toolchain::Artifacts;

fn inputs(a: &Artifacts) -> CheckInputs<'_> {
    CheckInputs {
        policy: &a.policy,
        bpolicy: &a.bpolicy,
        pts: &a.pts,
        image: &a.image,
        params: &a.params.concrete,
        resolver: &a.resolver,
    }
}

fn validity(c: &mut Criterion) {
    let mut g = c.benchmark_group("validity");
    for pages in [1024u64, 2048, 4096, 8192] {
        let a = wide(pages);
        g.throughput(Throughput::Elements(pages));
        g.bench_with_input(BenchmarkId::from_parameter(pages), &a, |b, a| {
            b.iter(|| check_validity(&a.bpolicy, &a.pts))
        });
    }
    g.finish();
}

fn full_check(c: &mut Criterion) {
    let desk = artifacts(Preset::DeskScale, 16);
    c.bench_function("check_all/desk_scale", |b| b.iter(|| check_all(inputs(&desk))));
    let micro = artifacts(Preset::Micro, 3);
    let mut g = c.benchmark_group("micro");
    g.bench_function("fast", |b| b.iter(|| check_all(inputs(&micro))));
    g.sample_size(10);
    g.bench_function("naive_2^22", |b| {
        b.iter(|| naive_check(&micro.bpolicy, &micro.pts, &micro.image, &micro.resolver, 1 << 22).unwrap())
    });
    g.finish();
}

criterion_group!(benches, validity, full_check);
criterion_main!(benches);
