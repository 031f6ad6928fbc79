//! Hand-derived trace through the two-CPU reference schedule in
//! `fixtures/fig4a.xml`, shared with the acceptance suite.
//!
//! Deadlines per CPU: CPU0 frame 0 = [40, 80], frame 1 = [80, 120];
//! CPU1 frame 0 = [80], frame 1 = [60, 120]. Subjects sub1..sub4 are
//! indices 0..3.

use skrefine_core::abstract_machine::AbstractMachine;
use skrefine_core::concrete_machine::ConcreteMachine;
use skrefine_core::content::ContentResolver;
use skrefine_core::harness::build_machines;
use skrefine_core::policy::parse_policy;
use skrefine_core::refinement::StepOutput;
use skrefine_core::toolchain::{generate, Artifacts, GenOptions};

pub fn fixtures() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures").to_string()
}

pub fn fig4a() -> Artifacts {
    let dir = fixtures();
    let text = std::fs::read_to_string(format!("{dir}/fig4a.xml")).expect("fixture");
    let p = parse_policy(&text).expect("fixture parses");
    generate(&p, ContentResolver::new(dir), &GenOptions::default()).expect("fixture generates")
}

fn expect<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, expected {want:?}"))
    }
}

fn ticks(abs: &mut AbstractMachine, conc: &mut ConcreteMachine, cpu: usize, n: usize) -> Result<(), String> {
    for _ in 0..n {
        expect("abstract tick", abs.a_tick(cpu), StepOutput::Ok)?;
        expect("concrete tick", conc.c_tick(cpu), StepOutput::Ok)?;
    }
    Ok(())
}

fn active(
    abs: &AbstractMachine,
    conc: &ConcreteMachine,
    cpu: usize,
    want: Option<usize>,
    when: &str,
) -> Result<(), String> {
    expect(&format!("{when}: abstract cpu{cpu} subject"), abs.active_subject(cpu), want)?;
    expect(&format!("{when}: concrete cpu{cpu} subject"), conc.active_subject(cpu), want)
}

/// Runs the trace on both machines and returns the first mismatch.
pub fn run() -> Result<(), String> {
    let a = fig4a();
    let (mut abs, mut conc) = build_machines(&a).map_err(|e| e.to_string())?;

    let when = "init";
    active(&abs, &conc, 0, Some(0), when)?;
    active(&abs, &conc, 1, Some(2), when)?;
    expect("init: timers", [conc.state.cpus[0].vmx_timer, conc.state.cpus[1].vmx_timer], [40, 80])?;
    expect("init: enabled", abs.enabled_subjects(), vec![true, false, true, false])?;

    ticks(&mut abs, &mut conc, 0, 39)?;
    active(&abs, &conc, 0, Some(0), "tick 39")?;
    ticks(&mut abs, &mut conc, 0, 1)?;
    let when = "cpu0 tick 40";
    active(&abs, &conc, 0, Some(1), when)?;
    expect(&format!("{when}: abstract minor"), abs.state.cpus[0].minor_fp, 1)?;
    expect(&format!("{when}: relaunch timer"), conc.state.cpus[0].vmx_timer, 40)?;
    expect(&format!("{when}: concrete minor"), conc.state.cpus[0].minor, 1)?;

    ticks(&mut abs, &mut conc, 1, 80)?;
    let when = "cpu1 tick 80";
    expect(&format!("{when}: barrier"), conc.state.cpus[1].in_barrier, true)?;
    expect(&format!("{when}: wait count"), conc.state.wait_count, 1)?;
    expect(&format!("{when}: frame"), conc.state.current_major_frame, 0)?;
    active(&abs, &conc, 1, None, when)?;
    active(&abs, &conc, 0, Some(1), when)?;

    ticks(&mut abs, &mut conc, 0, 40)?;
    let when = "cpu0 tick 80";
    expect(&format!("{when}: cmsc"), conc.state.cmsc, 80)?;
    expect(&format!("{when}: frame"), conc.state.current_major_frame, 1)?;
    expect(&format!("{when}: abstract frame"), abs.state.maj_fp, 1)?;
    expect(&format!("{when}: wait count"), conc.state.wait_count, 0)?;
    expect(
        &format!("{when}: barrier"),
        [conc.state.cpus[0].in_barrier, conc.state.cpus[1].in_barrier],
        [false, false],
    )?;
    expect(&format!("{when}: timers"), [conc.state.cpus[0].vmx_timer, conc.state.cpus[1].vmx_timer], [80, 60])?;
    active(&abs, &conc, 0, Some(0), when)?;
    active(&abs, &conc, 1, Some(3), when)?;
    Ok(())
}
