mod golden;

use skrefine_core::harness::{lockstep_run, trace_for, LockstepOptions};

#[test]
fn golden_schedule_trace() {
    golden::run().unwrap();
}

#[test]
fn random_steps_refine() {
    let a = golden::fig4a();
    let rep = lockstep_run(&a, &trace_for(&a, 10_000, 42), &LockstepOptions::default()).unwrap();
    assert!(rep.verdict.passed(), "{:?}", rep.verdict);
}
