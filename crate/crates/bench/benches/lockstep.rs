use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use skrefine_bench::artifacts;
use skrefine_core::harness::{build_machines, lockstep_run, trace_for, LockstepOptions};
use skrefine_core::refinement::{run_trace, OperationCall};
use skrefine_core::synth::Preset;

const STEPS: usize = 10_000;

fn lockstep(c: &mut Criterion) {
    let a = artifacts(Preset::Lockstep, 7);
    let trace: Vec<OperationCall> = trace_for(&a, STEPS, 7);
    let mut g = c.benchmark_group("lockstep");
    g.throughput(Throughput::Elements(STEPS as u64));
    g.sample_size(20);
    g.bench_function("glued_10k", |b| b.iter(|| lockstep_run(&a, &trace, &LockstepOptions::default()).unwrap()));
    g.bench_function("abstract_only_10k", |b| {
        b.iter(|| {
            let (mut abs, _) = build_machines(&a).unwrap();
            run_trace(&mut abs, &trace).unwrap()
        })
    });
    g.bench_function("concrete_only_10k", |b| {
        b.iter(|| {
            let (_, mut conc) = build_machines(&a).unwrap();
            run_trace(&mut conc, &trace).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, lockstep);
criterion_main!(benches);
