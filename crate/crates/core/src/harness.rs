//! Pairs the abstract and concrete machines: gluing relation, lock-step
//! runs over random or given traces, and executable separation properties.

use crate::abstract_machine::{self, AbstractLocation, AbstractMachine, Backing};
use crate::checker::{check_all, CheckInputs, Condition, ConditionReport};
use crate::concrete_machine::{ConcreteInitError, ConcreteMachine, KernelMutation};
use crate::content::ContentError;
use crate::isa::RegisterFile;
use crate::paging::PAGE_SIZE;
use crate::refinement::{check_lockstep_observed, LockstepError, OperationCall, StepOutput, Verdict};
use crate::toolchain::Artifacts;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("condition R fails ({0:?}); refinement is only claimed for passing configurations")]
    ConditionR(Vec<Condition>),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Concrete(#[from] ConcreteInitError),
    #[error(transparent)]
    Lockstep(#[from] LockstepError),
}

pub fn build_machines(a: &Artifacts) -> Result<(AbstractMachine, ConcreteMachine), HarnessError> {
    let abs = AbstractMachine::new(a.params.abs.clone(), &a.resolver)?;
    let conc = ConcreteMachine::new(a.params.concrete.clone(), a.pts.clone(), a.image.clone())?;
    Ok((abs, conc))
}

pub fn check_artifacts(a: &Artifacts) -> ConditionReport {
    check_all(CheckInputs {
        policy: &a.policy,
        bpolicy: &a.bpolicy,
        pts: &a.pts,
        image: &a.image,
        params: &a.params.concrete,
        resolver: &a.resolver,
    })
}

// --- Gluing relation -------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GluingReport {
    /// `g[i]` is conjunct `g{i+1}`.
    pub g: [bool; 7],
    pub detail: Option<String>,
}

impl GluingReport {
    fn new() -> Self {
        Self { g: [true; 7], detail: None }
    }

    fn fail(&mut self, conjunct: usize, detail: impl FnOnce() -> String) {
        if self.g[conjunct - 1] {
            self.g[conjunct - 1] = false;
            if self.detail.is_none() {
                self.detail = Some(format!("g{conjunct}: {}", detail()));
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.g.iter().all(|&g| g)
    }

    pub fn failed(&self) -> Vec<usize> {
        (1..=7).filter(|&i| !self.g[i - 1]).collect()
    }
}

impl fmt::Display for GluingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.detail {
            None => f.write_str("glue ok"),
            Some(d) => f.write_str(d),
        }
    }
}

/// Precomputed address maps for checking memory agreement.
#[derive(Clone, Debug)]
pub struct Glue {
    /// Valid page addresses of each subject, sorted.
    pages: Vec<Vec<u64>>,
    /// Physical page of each valid page through the concrete page table.
    translation: Vec<HashMap<u64, Option<u64>>>,
    /// Physical page to the `(subject, page)` pairs mapping it.
    by_pa: HashMap<u64, Vec<(usize, u64)>>,
    /// Channel-memory page to the `(subject, page)` pairs attached to it.
    by_chmem: HashMap<u64, Vec<(usize, u64)>>,
}

impl Glue {
    pub fn new(abs: &AbstractMachine, conc: &mut ConcreteMachine) -> Self {
        let st = &abs.state;
        let mut pages = Vec::with_capacity(st.subjects.len());
        let mut translation = Vec::with_capacity(st.subjects.len());
        let mut by_pa: HashMap<u64, Vec<(usize, u64)>> = HashMap::new();
        let mut by_chmem: HashMap<u64, Vec<(usize, u64)>> = HashMap::new();
        for (s, sub) in st.subjects.iter().enumerate() {
            let mut vas: Vec<u64> = sub.pages.keys().copied().collect();
            vas.sort_unstable();
            let mut t = HashMap::with_capacity(vas.len());
            for &va in &vas {
                let pa = conc.translate(s, va).map(|t| t.pa);
                if let Some(pa) = pa {
                    by_pa.entry(pa).or_default().push((s, va));
                }
                if let Backing::Channel(base) = sub.pages[&va].backing {
                    by_chmem.entry(base).or_default().push((s, va));
                }
                t.insert(va, pa);
            }
            pages.push(vas);
            translation.push(t);
        }
        Self { pages, translation, by_pa, by_chmem }
    }

    fn concrete_byte(&self, conc: &ConcreteMachine, s: usize, va: u64) -> Option<u8> {
        let pa = (*self.translation[s].get(&(va & !(PAGE_SIZE - 1)))?)?;
        conc.state.pmem.get((pa + (va & (PAGE_SIZE - 1))) as usize).copied()
    }

    fn page_agrees(&self, abs: &AbstractMachine, conc: &ConcreteMachine, s: usize, va: u64) -> Result<(), String> {
        let want = abs.state.page_bytes(s, va).expect("valid page");
        let Some(pa) = self.translation[s][&va] else {
            return Err(format!("subject {s} page {va:#x} has no concrete translation"));
        };
        let Some(got) = conc.state.pmem.get(pa as usize..(pa + PAGE_SIZE) as usize) else {
            return Err(format!("subject {s} page {va:#x} translates outside physical memory"));
        };
        match want.iter().zip(got).position(|(a, b)| a != b) {
            None => Ok(()),
            Some(off) => Err(format!(
                "subject {s} va {:#x}: abstract {:#04x}, concrete {:#04x} at pa {:#x}",
                va + off as u64,
                want[off],
                got[off],
                pa + off as u64
            )),
        }
    }

    /// Evaluates g1 to g7. With `full_memory` unset, g2 only looks at bytes
    /// the last step may have changed.
    pub fn check(&self, abs: &AbstractMachine, conc: &ConcreteMachine, full_memory: bool) -> GluingReport {
        let mut r = GluingReport::new();
        let (a, c) = (&abs.state, &conc.state);
        let sched = abs.sched();
        let enabled = abs.enabled_subjects();

        // g1 registers
        for (s, sub) in a.subjects.iter().enumerate() {
            let want = sub.regs;
            let (got, which) = if enabled[s] { (c.vmcss[s].regs, "live") } else { (c.subject_descs[s], "descriptor") };
            if want != got {
                r.fail(1, || format!("subject {s} {which} registers {got:?}, abstract {want:?}"));
            }
        }

        // g2 memory
        if full_memory {
            for (s, vas) in self.pages.iter().enumerate() {
                for &va in vas {
                    if let Err(e) = self.page_agrees(abs, conc, s, va) {
                        r.fail(2, || e);
                    }
                }
            }
        } else {
            let mut touched: BTreeSet<(usize, u64)> = BTreeSet::new();
            if let Some((s, va)) = abs.last_write {
                touched.insert((s, va));
                if let Some(AbstractLocation::Channel(off)) = a.locate(s, va) {
                    let page = off & !(PAGE_SIZE - 1);
                    for &(o, ova) in self.by_chmem.get(&page).into_iter().flatten() {
                        touched.insert((o, ova + (off - page)));
                    }
                }
            }
            if let Some((s, va, pa)) = conc.last_write {
                touched.insert((s, va));
                let page = pa & !(PAGE_SIZE - 1);
                for &(o, ova) in self.by_pa.get(&page).into_iter().flatten() {
                    touched.insert((o, ova + (pa - page)));
                }
            }
            for (s, va) in touched {
                let want = a.byte(s, va);
                let got = self.concrete_byte(conc, s, va);
                if want.is_some() && want != got {
                    r.fail(2, || format!("subject {s} va {va:#x}: abstract {want:?}, concrete {got:?}"));
                }
            }
        }

        // g3 to g6, per CPU
        let l = sched.cycle_length;
        if c.current_major_frame != a.maj_fp || c.current_cycle != a.cycles {
            r.fail(4, || {
                format!(
                    "frame/cycle concrete ({}, {}), abstract ({}, {})",
                    c.current_major_frame, c.current_cycle, a.maj_fp, a.cycles
                )
            });
        }
        for (cpu, (ac, cc)) in a.cpus.iter().zip(&c.cpus).enumerate() {
            let ideal = ac.ideal_cycles * l + ac.ticks;
            let global = a.cycles * l + sched.major_start(a.maj_fp);
            if cc.tsc.checked_sub(c.cmsc) != ideal.checked_sub(global) {
                r.fail(3, || {
                    format!("cpu {cpu}: tsc - cmsc = {} - {}, ideal - global = {ideal} - {global}", cc.tsc, c.cmsc)
                });
            }
            let en = a.enabled_cpu(cpu);
            if cc.in_barrier == en {
                r.fail(6, || format!("cpu {cpu}: in_barrier={} but abstract enabled={en}", cc.in_barrier));
            }
            if en && !cc.in_barrier {
                if cc.minor != ac.minor_fp || conc.active_subject(cpu) != abs.active_subject(cpu) {
                    r.fail(4, || format!("cpu {cpu}: concrete minor {} abstract {}", cc.minor, ac.minor_fp));
                }
                let deadline = sched.minor_frames(cpu, a.maj_fp).get(ac.minor_fp).map(|m| m.deadline);
                if Some(u64::from(cc.vmx_timer) + ac.min_ticks) != deadline {
                    r.fail(5, || {
                        format!(
                            "cpu {cpu}: timer {} + min_ticks {} vs deadline {deadline:?}",
                            cc.vmx_timer, ac.min_ticks
                        )
                    });
                }
            }
        }

        // g7 events
        if c.global_events != a.pending {
            r.fail(7, || format!("global events {:?}, abstract pending {:?}", c.global_events, a.pending));
        }
        r
    }
}

pub fn glue_check(abs: &AbstractMachine, conc: &mut ConcreteMachine) -> GluingReport {
    Glue::new(abs, conc).check(abs, conc, true)
}

// --- Traces ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceWeights {
    pub exec: u32,
    pub tick: u32,
    pub interrupt: u32,
}

impl Default for TraceWeights {
    fn default() -> Self {
        Self { exec: 70, tick: 25, interrupt: 5 }
    }
}

/// Random operations over `ncpus` CPUs. Half the interrupt vectors come
/// from `routed`, the rest are uniform over all 256.
pub fn random_trace(
    ncpus: usize,
    routed: &[u8],
    steps: usize,
    weights: TraceWeights,
    rng: &mut impl Rng,
) -> Vec<OperationCall> {
    let total = weights.exec + weights.tick + weights.interrupt;
    assert!(total > 0, "all trace weights are zero");
    (0..steps)
        .map(|_| {
            let cpu = rng.gen_range(0..ncpus);
            let w = rng.gen_range(0..total);
            if w < weights.exec {
                abstract_machine::exec(cpu)
            } else if w < weights.exec + weights.tick {
                abstract_machine::tick(cpu)
            } else {
                let vector = match routed.choose(rng) {
                    Some(&v) if rng.gen_bool(0.5) => v,
                    _ => rng.gen(),
                };
                abstract_machine::interrupt(cpu, vector)
            }
        })
        .collect()
}

pub fn trace_for(a: &Artifacts, steps: usize, seed: u64) -> Vec<OperationCall> {
    let routed: Vec<u8> = a.policy.routing.iter().map(|r| r.vector).collect();
    random_trace(a.policy.ncpus, &routed, steps, TraceWeights::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

// --- Lock-step runs --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LockstepOptions {
    /// Run even when condition R fails.
    pub force: bool,
    /// Check all memory every this many steps, besides init and the end.
    pub full_memory_every: usize,
    pub record_log: bool,
    pub mutation: KernelMutation,
}

impl Default for LockstepOptions {
    fn default() -> Self {
        Self { force: false, full_memory_every: 1000, record_log: false, mutation: KernelMutation::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub op: String,
    #[serde(rename = "abstract")]
    pub abstract_output: StepOutput,
    pub concrete: StepOutput,
    pub glue: String,
}

#[derive(Debug)]
pub struct LockstepReport {
    pub verdict: Verdict,
    pub log: Vec<StepRecord>,
    pub abs: AbstractMachine,
    pub conc: ConcreteMachine,
}

/// Runs both machines over `trace` checking outputs, the gluing relation
/// and both sets of invariants after every step.
pub fn lockstep_machines(
    mut abs: AbstractMachine,
    mut conc: ConcreteMachine,
    trace: &[OperationCall],
    opts: &LockstepOptions,
) -> Result<LockstepReport, HarnessError> {
    conc.mutation = opts.mutation;
    let glue = Glue::new(&abs, &mut conc);
    let total = trace.len() + usize::from(trace.first().is_none_or(|c| c.name != crate::refinement::INIT));
    let log: RefCell<Vec<StepRecord>> = RefCell::new(Vec::new());
    let mut step = 0usize;
    let verdict = check_lockstep_observed(
        &mut abs,
        &mut conc,
        trace,
        |a, c| {
            step += 1;
            let full = step == 1 || step == total || step.is_multiple_of(opts.full_memory_every.max(1));
            let report = glue.check(a, c, full);
            let mut result = if report.passed() { Ok(()) } else { Err(report.to_string()) };
            if result.is_ok() {
                let ai = a.invariants();
                let ci = c.invariants();
                if !ai.is_empty() || !ci.is_empty() {
                    result = Err(format!("invariants violated: abstract {ai:?}, concrete {ci:?}"));
                }
            }
            if opts.record_log {
                if let Some(last) = log.borrow_mut().last_mut() {
                    last.glue = result.as_ref().err().cloned().unwrap_or_else(|| "ok".into());
                }
            }
            result
        },
        |step, call, a, c, _, _| {
            if opts.record_log {
                log.borrow_mut().push(StepRecord {
                    step,
                    op: call.to_string(),
                    abstract_output: a,
                    concrete: c,
                    glue: String::new(),
                });
            }
        },
    )?;
    Ok(LockstepReport { verdict, log: log.into_inner(), abs, conc })
}

/// Lock-step run on generated artifacts. Refuses unless condition R holds
/// or `opts.force` is set.
pub fn lockstep_run(
    a: &Artifacts,
    trace: &[OperationCall],
    opts: &LockstepOptions,
) -> Result<LockstepReport, HarnessError> {
    if !opts.force {
        let report = check_artifacts(a);
        if !report.passed() {
            return Err(HarnessError::ConditionR(report.failed_conditions()));
        }
    }
    let (abs, conc) = build_machines(a)?;
    lockstep_machines(abs, conc, trace, opts)
}

// --- Security properties ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SecurityVerdict {
    pub property: &'static str,
    pub passed: bool,
    /// Number of individual comparisons made.
    pub checks: usize,
    pub detail: Option<String>,
}

impl SecurityVerdict {
    fn new(property: &'static str) -> Self {
        Self { property, passed: true, checks: 0, detail: None }
    }

    fn fail(&mut self, detail: String) {
        if self.passed {
            self.passed = false;
            self.detail = Some(detail);
        }
    }
}

/// Non-channel pages of a subject as the policy declares them.
fn private_pages(abs: &AbstractMachine, s: usize) -> Vec<u64> {
    let mut v: Vec<u64> = abs.state.subjects[s]
        .pages
        .iter()
        .filter(|(_, p)| matches!(p.backing, Backing::Private(_)))
        .map(|(va, _)| *va)
        .collect();
    v.sort_unstable();
    v
}

fn writable_private_pages(abs: &AbstractMachine, s: usize) -> Vec<u64> {
    private_pages(abs, s).into_iter().filter(|va| abs.state.subjects[s].pages[va].perms.w).collect()
}

/// Digest of everything subject `s` can see: registers excluded, every
/// valid page, channels included.
fn abstract_view(abs: &AbstractMachine, s: usize) -> [u8; 32] {
    let mut vas: Vec<u64> = abs.state.subjects[s].pages.keys().copied().collect();
    vas.sort_unstable();
    let mut h = Sha256::new();
    for va in vas {
        h.update(va.to_le_bytes());
        h.update(abs.state.page_bytes(s, va).expect("valid page"));
    }
    h.finalize().into()
}

fn concrete_view(glue: &Glue, conc: &ConcreteMachine, s: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    for &va in &glue.pages[s] {
        h.update(va.to_le_bytes());
        match glue.translation[s][&va].and_then(|pa| conc.state.pmem.get(pa as usize..(pa + PAGE_SIZE) as usize)) {
            Some(bytes) => h.update(bytes),
            None => h.update([0xde, 0xad]),
        }
    }
    h.finalize().into()
}

fn private_concrete_view(glue: &Glue, abs: &AbstractMachine, conc: &ConcreteMachine, s: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    for va in private_pages(abs, s) {
        h.update(va.to_le_bytes());
        if let Some(bytes) =
            glue.translation[s][&va].and_then(|pa| conc.state.pmem.get(pa as usize..(pa + PAGE_SIZE) as usize))
        {
            h.update(bytes);
        }
    }
    h.finalize().into()
}

/// Runs `trace` on both machines independently, stopping at a halt.
fn advance(abs: &mut AbstractMachine, conc: &mut ConcreteMachine, trace: &[OperationCall]) {
    use crate::refinement::Machine;
    for call in trace {
        let a = abs.apply(call);
        let c = conc.apply(call);
        if a == StepOutput::Halted || c == StepOutput::Halted {
            break;
        }
    }
}

fn prefix(a: &Artifacts, seed: u64, rng: &mut ChaCha8Rng) -> Result<(AbstractMachine, ConcreteMachine), HarnessError> {
    let (mut abs, mut conc) = build_machines(a)?;
    let n = rng.gen_range(0..2000);
    advance(&mut abs, &mut conc, &trace_for(a, n, seed));
    Ok((abs, conc))
}

/// A store by any subject into one of its own non-channel pages leaves
/// every other subject's view unchanged. Every writable private page of
/// every subject is probed once, on copies of a randomly advanced state.
pub fn test_no_exfiltration(a: &Artifacts, seed: u64) -> Result<SecurityVerdict, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4f1);
    let (abs, mut conc) = prefix(a, seed, &mut rng)?;
    let glue = Glue::new(&abs, &mut conc);
    let n = abs.state.subjects.len();
    let base_a: Vec<_> = (0..n).map(|s| abstract_view(&abs, s)).collect();
    let base_c: Vec<_> = (0..n).map(|s| concrete_view(&glue, &conc, s)).collect();
    let mut v = SecurityVerdict::new("no-exfiltration");
    for s in 0..n {
        for page in writable_private_pages(&abs, s) {
            let va = page + rng.gen_range(0..PAGE_SIZE);
            let (mut a2, mut c2) = (abs.clone(), conc.clone());
            let value = !a2.state.byte(s, va).expect("valid page");
            if a2.guest_write(s, va, value).is_err() || c2.guest_write(s, va, value).is_err() {
                continue;
            }
            for o in (0..n).filter(|&o| o != s) {
                v.checks += 1;
                if abstract_view(&a2, o) != base_a[o] {
                    v.fail(format!("abstract: store by subject {s} at {va:#x} changed subject {o}"));
                }
                if concrete_view(&glue, &c2, o) != base_c[o] {
                    v.fail(format!("concrete: store by subject {s} at {va:#x} changed subject {o}"));
                }
            }
        }
    }
    Ok(v)
}

/// Advance both machines until subject `s` is running, ticking all CPUs in
/// turn. Gives up after two full cycles.
fn activate(abs: &mut AbstractMachine, conc: &mut ConcreteMachine, s: usize) -> Option<usize> {
    let cpu = abs.params().subjects[s].cpu;
    let ncpus = abs.params().ncpus;
    let limit = 2 * abs.sched().cycle_length as usize * ncpus + 1;
    for i in 0..limit {
        if abs.active_subject(cpu) == Some(s) && conc.active_subject(cpu) == Some(s) {
            return Some(cpu);
        }
        if abs.a_tick(i % ncpus) == StepOutput::Halted || conc.c_tick(i % ncpus) == StepOutput::Halted {
            return None;
        }
    }
    None
}

fn perturb_others(abs: &mut AbstractMachine, conc: &mut ConcreteMachine, glue: &Glue, s: usize, rng: &mut ChaCha8Rng) {
    let n = abs.state.subjects.len();
    for o in (0..n).filter(|&o| o != s) {
        let regs = RegisterFile { gp: rng.gen(), ip: rng.gen(), sp: rng.gen(), ir: rng.gen() };
        abs.state.subjects[o].regs = regs;
        conc.state.subject_descs[o] = regs;
        conc.state.vmcss[o].regs = regs;
        for va in private_pages(abs, o) {
            let mut fresh = [0u8; PAGE_SIZE as usize];
            rng.fill(&mut fresh[..]);
            if let Backing::Private(bytes) = &mut abs.state.subjects[o].pages.get_mut(&va).expect("valid").backing {
                bytes.copy_from_slice(&fresh);
            }
            if let Some(pa) = glue.translation[o][&va] {
                if let Some(dst) = conc.state.pmem.get_mut(pa as usize..(pa + PAGE_SIZE) as usize) {
                    dst.copy_from_slice(&fresh);
                }
            }
        }
    }
}

/// A subject's execution is unaffected by the registers and private memory
/// of every other subject. For each subject, two copies of a running state
/// that differ only outside that subject execute the same instructions and
/// must end with equal registers and equal views.
pub fn test_no_infiltration(a: &Artifacts, seed: u64) -> Result<SecurityVerdict, HarnessError> {
    const EXECS: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1af1);
    let (abs0, mut conc0) = prefix(a, seed, &mut rng)?;
    let glue = Glue::new(&abs0, &mut conc0);
    let mut v = SecurityVerdict::new("no-infiltration");
    for s in 0..abs0.state.subjects.len() {
        let (mut abs, mut conc) = (abs0.clone(), conc0.clone());
        let Some(cpu) = activate(&mut abs, &mut conc, s) else { continue };
        let (mut abs2, mut conc2) = (abs.clone(), conc.clone());
        perturb_others(&mut abs2, &mut conc2, &glue, s, &mut rng);
        for _ in 0..EXECS {
            let outs = [abs.a_execute(cpu), abs2.a_execute(cpu), conc.c_execute(cpu), conc2.c_execute(cpu)];
            if outs[0] != outs[1] || outs[2] != outs[3] {
                v.fail(format!("subject {s}: outputs {outs:?} differ under perturbation"));
                break;
            }
            if outs[0] == StepOutput::Halted {
                break;
            }
        }
        v.checks += 1;
        if abs.state.subjects[s].regs != abs2.state.subjects[s].regs
            || abstract_view(&abs, s) != abstract_view(&abs2, s)
        {
            v.fail(format!("abstract: subject {s} influenced by other subjects"));
        }
        if conc.current_regs(s) != conc2.current_regs(s)
            || concrete_view(&glue, &conc, s) != concrete_view(&glue, &conc2, s)
        {
            v.fail(format!("concrete: subject {s} influenced by other subjects"));
        }
    }
    Ok(v)
}

/// Over at least one full schedule cycle: every running subject is the one
/// the schedule names for the time elapsed in the current major frame, and
/// each subject's registers and private memory are unchanged from its
/// deactivation to its reactivation.
pub fn test_temporal_separation(
    a: &Artifacts,
    seed: u64,
    mutation: KernelMutation,
) -> Result<SecurityVerdict, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3b);
    let (mut abs, mut conc) = build_machines(a)?;
    conc.mutation = mutation;
    let glue = Glue::new(&abs, &mut conc);
    let p = a.params.concrete.clone();
    let ncpus = p.ncpus;
    let n = p.nsubs;
    let weights = TraceWeights { exec: 60, tick: 40, interrupt: 0 };
    let routed: Vec<u8> = Vec::new();
    let mut v = SecurityVerdict::new("temporal-separation");
    let mut saved: Vec<Option<(RegisterFile, [u8; 32])>> = vec![None; n];
    let target = p.sched.cycle_length + 1;
    let mut guard = 0usize;
    while conc.state.cpus.iter().any(|c| c.tsc < target) && guard < 200 * target as usize * ncpus {
        guard += 1;
        let call = &random_trace(ncpus, &routed, 1, weights, &mut rng)[0];
        let before: Vec<Option<(RegisterFile, [u8; 32])>> = (0..n)
            .map(|s| {
                (0..ncpus)
                    .any(|c| conc.active_subject(c) == Some(s))
                    .then(|| (conc.current_regs(s), private_concrete_view(&glue, &abs, &conc, s)))
            })
            .collect();
        let out = {
            use crate::refinement::Machine;
            abs.apply(call);
            conc.apply(call)
        };
        if out == StepOutput::Halted {
            break;
        }
        let active: Vec<bool> = (0..n).map(|s| (0..ncpus).any(|c| conc.active_subject(c) == Some(s))).collect();
        for cpu in 0..ncpus {
            let Some(s) = conc.active_subject(cpu) else { continue };
            let c = &conc.state.cpus[cpu];
            let elapsed = c.tsc - conc.state.cmsc;
            let expected = p
                .sched
                .minor_frames(cpu, conc.state.current_major_frame)
                .iter()
                .find(|m| m.deadline > elapsed)
                .map(|m| m.subject);
            v.checks += 1;
            if expected != Some(s) {
                v.fail(format!("cpu {cpu} runs subject {s}, schedule names {expected:?} at elapsed {elapsed}"));
            }
        }
        for s in 0..n {
            match (before[s], active[s]) {
                (Some(state), false) => saved[s] = Some(state),
                (None, true) => {
                    if let Some((regs, mem)) = saved[s].take() {
                        v.checks += 1;
                        if conc.current_regs(s) != regs {
                            v.fail(format!(
                                "subject {s} resumed with registers {:?}, left with {regs:?}",
                                conc.current_regs(s)
                            ));
                        }
                        if private_concrete_view(&glue, &abs, &conc, s) != mem {
                            v.fail(format!("subject {s} private memory changed while inactive"));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    Ok(v)
}
