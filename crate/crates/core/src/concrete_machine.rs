//! The concrete system: one physical memory initialized from the image,
//! per-subject page tables, a VMCS per subject and per-CPU VT-x state,
//! driven by the generated kernel's timer and barrier handling.

use crate::abstract_machine::{kernel_machine_type, Mode, EXEC, INTERRUPT, TICK};
use crate::isa::{self, AccessKind, GuestFault, GuestMemory, RegisterFile};
use crate::paging::{PagingStructureFile, Translation, PAGE_SIZE};
use crate::refinement::{Machine, MachineType, OpInput, OperationCall, StepOutput, INIT};
use crate::toolchain::ParamsConcrete;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vmcs {
    pub regs: RegisterFile,
    /// Page-table index standing in for the CR3/EPTP pair.
    pub pt: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CpuState {
    pub vmptr: Option<usize>,
    pub eptp: Option<usize>,
    pub vmx_timer: u32,
    pub tsc: u64,
    pub in_barrier: bool,
    /// Index of the current minor frame in the current major frame.
    pub minor: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcreteState {
    pub pmem: Vec<u8>,
    pub vmcss: Vec<Vmcs>,
    pub cpus: Vec<CpuState>,
    pub subject_descs: Vec<RegisterFile>,
    pub cmsc: u64,
    pub current_major_frame: usize,
    pub current_cycle: u64,
    pub wait_count: usize,
    pub global_events: Vec<u64>,
    pub mode: Mode,
}

/// Deliberate kernel defects for testing the harness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelMutation {
    /// The timer handler does not save guest registers before switching.
    pub skip_register_save: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConcreteInitError {
    #[error("expected {expected} page-table files, got {got}")]
    PageTableCount { expected: usize, got: usize },
    #[error("image has {got} bytes, parameters declare {expected}")]
    ImageLength { expected: u64, got: usize },
    #[error("schedule tables are malformed: {0}")]
    Schedule(String),
}

type TranslationCache = Vec<HashMap<u64, Option<Translation>>>;

#[derive(Clone, Debug)]
pub struct ConcreteMachine {
    params: Arc<ParamsConcrete>,
    pts: Arc<Vec<PagingStructureFile>>,
    image: Arc<Vec<u8>>,
    tcache: TranslationCache,
    pub mutation: KernelMutation,
    pub state: ConcreteState,
    /// Subject, virtual and physical address of the byte written by the
    /// last `exec`, if any.
    pub last_write: Option<(usize, u64, u64)>,
}

/// Memory view of one subject through its page table.
struct PagedView<'a> {
    pt: &'a PagingStructureFile,
    cache: &'a mut HashMap<u64, Option<Translation>>,
    pmem: &'a mut [u8],
    last_write: Option<(u64, u64)>,
}

fn translate_cached(
    pt: &PagingStructureFile,
    cache: &mut HashMap<u64, Option<Translation>>,
    va: u64,
) -> Option<Translation> {
    let page = va & !(PAGE_SIZE - 1);
    *cache.entry(page).or_insert_with(|| pt.translate(page).ok().flatten())
}

impl PagedView<'_> {
    fn pa(&mut self, va: u64, kind: AccessKind) -> Result<usize, GuestFault> {
        let fault = GuestFault::Access { va, kind };
        let t = translate_cached(self.pt, self.cache, va).ok_or(fault)?;
        let allowed = match kind {
            AccessKind::Fetch => t.perms.x,
            AccessKind::Read => t.perms.r,
            AccessKind::Write => t.perms.w,
        };
        let pa = t.pa + (va & (PAGE_SIZE - 1));
        if !allowed || pa >= self.pmem.len() as u64 {
            return Err(fault);
        }
        Ok(pa as usize)
    }
}

impl GuestMemory for PagedView<'_> {
    fn read(&mut self, va: u64, kind: AccessKind) -> Result<u8, GuestFault> {
        let pa = self.pa(va, kind)?;
        Ok(self.pmem[pa])
    }

    fn write(&mut self, va: u64, value: u8) -> Result<(), GuestFault> {
        let pa = self.pa(va, AccessKind::Write)?;
        self.pmem[pa] = value;
        self.last_write = Some((va, pa as u64));
        Ok(())
    }
}

impl ConcreteMachine {
    pub fn new(
        params: ParamsConcrete,
        pts: Vec<PagingStructureFile>,
        image: Vec<u8>,
    ) -> Result<Self, ConcreteInitError> {
        if pts.len() != params.nsubs {
            return Err(ConcreteInitError::PageTableCount { expected: params.nsubs, got: pts.len() });
        }
        if image.len() as u64 != params.image_len {
            return Err(ConcreteInitError::ImageLength { expected: params.image_len, got: image.len() });
        }
        if let Some(e) = params.sched.check_invariants().into_iter().next() {
            return Err(ConcreteInitError::Schedule(e));
        }
        let mut m = Self {
            tcache: vec![HashMap::new(); params.nsubs],
            params: Arc::new(params),
            pts: Arc::new(pts),
            image: Arc::new(image),
            mutation: KernelMutation::default(),
            state: ConcreteState {
                pmem: Vec::new(),
                vmcss: Vec::new(),
                cpus: Vec::new(),
                subject_descs: Vec::new(),
                cmsc: 0,
                current_major_frame: 0,
                current_cycle: 0,
                wait_count: 0,
                global_events: Vec::new(),
                mode: Mode::Running,
            },
            last_write: None,
        };
        m.c_init();
        Ok(m)
    }

    pub fn params(&self) -> &ParamsConcrete {
        &self.params
    }

    pub fn pts(&self) -> &[PagingStructureFile] {
        &self.pts
    }

    /// Translation of `va` through subject `s`'s page table.
    pub fn translate(&mut self, s: usize, va: u64) -> Option<Translation> {
        translate_cached(&self.pts[s], &mut self.tcache[s], va)
    }

    pub fn c_init(&mut self) {
        let p = &self.params;
        let descs: Vec<RegisterFile> =
            p.subject_specs.iter().map(|s| RegisterFile::at_entry(s.entry_ip, s.entry_sp)).collect();
        self.state = ConcreteState {
            pmem: (*self.image).clone(),
            vmcss: descs.iter().enumerate().map(|(pt, &regs)| Vmcs { regs, pt }).collect(),
            cpus: vec![CpuState::default(); p.ncpus],
            subject_descs: descs,
            cmsc: 0,
            current_major_frame: 0,
            current_cycle: 0,
            wait_count: 0,
            global_events: vec![0; p.nsubs],
            mode: Mode::Running,
        };
        for cpu in 0..p.ncpus {
            self.launch(cpu, 0, 0);
        }
        self.last_write = None;
    }

    /// VMPTRLD and VMLAUNCH of the subject in minor frame `minor`, with the
    /// timer set to what remains of that frame after `elapsed` ticks.
    fn launch(&mut self, cpu: usize, minor: usize, elapsed: u64) {
        let mf = &self.params.sched.sched_plans[cpu][self.state.current_major_frame][minor];
        let s = mf.subject;
        let st = &mut self.state;
        st.vmcss[s].regs = st.subject_descs[s];
        let c = &mut st.cpus[cpu];
        c.minor = minor;
        c.vmptr = Some(s);
        c.eptp = Some(st.vmcss[s].pt);
        c.vmx_timer = u32::try_from(mf.deadline - elapsed).expect("deadlines fit the timer");
        c.in_barrier = false;
    }

    fn save_guest(&mut self, s: usize) {
        self.state.subject_descs[s] = self.state.vmcss[s].regs;
    }

    pub fn active_subject(&self, cpu: usize) -> Option<usize> {
        let c = &self.state.cpus[cpu];
        if c.in_barrier {
            None
        } else {
            c.vmptr
        }
    }

    pub fn c_execute(&mut self, cpu: usize) -> StepOutput {
        self.last_write = None;
        if self.state.mode != Mode::Running {
            return StepOutput::Halted;
        }
        let Some(s) = self.active_subject(cpu) else { return StepOutput::Noop };
        let st = &mut self.state;
        let regs = &mut st.vmcss[s].regs;
        isa::inject_pending(regs, &mut st.global_events[s]);
        let mut view = PagedView { pt: &self.pts[s], cache: &mut self.tcache[s], pmem: &mut st.pmem, last_write: None };
        let result = isa::step(regs, &mut view);
        self.last_write = view.last_write.map(|(va, pa)| (s, va, pa));
        match result {
            // a hypercall exits to the kernel, which saves and resumes
            Ok(isa::Effect::Hypercall) => {
                st.subject_descs[s] = st.vmcss[s].regs;
                let saved = st.subject_descs[s];
                st.vmcss[s].regs = saved;
                StepOutput::Ok
            }
            Ok(isa::Effect::Continue) => StepOutput::Ok,
            Err(_) => {
                st.mode = Mode::ErrorHalt;
                StepOutput::Halted
            }
        }
    }

    pub fn c_tick(&mut self, cpu: usize) -> StepOutput {
        self.last_write = None;
        if self.state.mode != Mode::Running {
            return StepOutput::Halted;
        }
        let c = &mut self.state.cpus[cpu];
        c.tsc += 1;
        if c.in_barrier {
            return StepOutput::Ok;
        }
        c.vmx_timer -= 1;
        if c.vmx_timer > 0 {
            return StepOutput::Ok;
        }
        // VM exit on timer expiry
        let s = c.vmptr.expect("active cpu has a vmcs");
        let next = c.minor + 1;
        if !self.mutation.skip_register_save {
            self.save_guest(s);
        }
        let frame = self.state.current_major_frame;
        if next < self.params.sched.minor_frames(cpu, frame).len() {
            let elapsed = self.state.cpus[cpu].tsc - self.state.cmsc;
            self.launch(cpu, next, elapsed);
        } else {
            self.enter_barrier(cpu);
            while self.state.wait_count == self.params.ncpus {
                self.release();
            }
        }
        StepOutput::Ok
    }

    fn enter_barrier(&mut self, cpu: usize) {
        let c = &mut self.state.cpus[cpu];
        c.in_barrier = true;
        c.vmptr = None;
        c.eptp = None;
        self.state.wait_count += 1;
    }

    /// Done by the last CPU to arrive: advance the major frame and start
    /// every CPU at its position within the new frame.
    fn release(&mut self) {
        let sched = Arc::clone(&self.params);
        let sched = &sched.sched;
        let st = &mut self.state;
        st.wait_count = 0;
        for c in &mut st.cpus {
            c.in_barrier = false;
        }
        st.cmsc += sched.major_frames[st.current_major_frame];
        st.current_major_frame += 1;
        if st.current_major_frame == sched.num_major_frames() {
            st.current_major_frame = 0;
            st.current_cycle += 1;
        }
        let frame = st.current_major_frame;
        for cpu in 0..self.params.ncpus {
            let elapsed = self.state.cpus[cpu].tsc - self.state.cmsc;
            if elapsed >= sched.major_frames[frame] {
                self.enter_barrier(cpu);
            } else {
                let minor = sched
                    .minor_frames(cpu, frame)
                    .iter()
                    .position(|m| m.deadline > elapsed)
                    .expect("elapsed below frame length");
                self.launch(cpu, minor, elapsed);
            }
        }
    }

    pub fn c_interrupt(&mut self, cpu: usize, vector: u8) -> StepOutput {
        self.last_write = None;
        if self.state.mode != Mode::Running {
            return StepOutput::Halted;
        }
        // the exit on `cpu` saves and later resumes the guest unchanged
        let interrupted = self.active_subject(cpu);
        if let Some(s) = interrupted {
            self.save_guest(s);
        }
        let out = match self.params.vector_routing.iter().find(|r| r.vector == vector) {
            Some(r) => {
                self.state.global_events[r.subject] |= 1 << r.dest_vector;
                StepOutput::Routed(r.subject)
            }
            None => StepOutput::Dropped,
        };
        if let Some(s) = interrupted {
            self.state.vmcss[s].regs = self.state.subject_descs[s];
        }
        out
    }

    /// Register file of subject `s` as the hardware would resume it: live in
    /// the VMCS when loaded on a running CPU, otherwise the saved copy.
    pub fn current_regs(&self, s: usize) -> RegisterFile {
        if (0..self.params.ncpus).any(|c| self.active_subject(c) == Some(s)) {
            self.state.vmcss[s].regs
        } else {
            self.state.subject_descs[s]
        }
    }

    pub fn invariants(&self) -> Vec<&'static str> {
        c_invariants(&self.state, &self.params)
    }

    /// Writes a byte through subject `s`'s page table if it maps `va`
    /// writable.
    pub fn guest_write(&mut self, s: usize, va: u64, value: u8) -> Result<u64, GuestFault> {
        let mut view =
            PagedView { pt: &self.pts[s], cache: &mut self.tcache[s], pmem: &mut self.state.pmem, last_write: None };
        view.write(va, value)?;
        Ok(view.last_write.expect("write recorded").1)
    }

    /// Reads a byte through subject `s`'s page table, ignoring permissions
    /// other than presence.
    pub fn read_byte(&mut self, s: usize, va: u64) -> Option<u8> {
        let t = self.translate(s, va)?;
        self.state.pmem.get((t.pa + (va & (PAGE_SIZE - 1))) as usize).copied()
    }

    pub fn snapshot(&self) -> ConcreteSnapshot {
        let st = &self.state;
        ConcreteSnapshot {
            mode: st.mode,
            cmsc: st.cmsc,
            current_major_frame: st.current_major_frame,
            current_cycle: st.current_cycle,
            wait_count: st.wait_count,
            cpus: st.cpus.clone(),
            vmcss: st.vmcss.clone(),
            subject_descs: st.subject_descs.clone(),
            global_events: st.global_events.clone(),
            pmem_sha256: hex::encode(Sha256::digest(&st.pmem)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcreteSnapshot {
    pub mode: Mode,
    pub cmsc: u64,
    pub current_major_frame: usize,
    pub current_cycle: u64,
    pub wait_count: usize,
    pub cpus: Vec<CpuState>,
    pub vmcss: Vec<Vmcs>,
    pub subject_descs: Vec<RegisterFile>,
    pub global_events: Vec<u64>,
    pub pmem_sha256: String,
}

pub fn c_invariants(st: &ConcreteState, params: &ParamsConcrete) -> Vec<&'static str> {
    let mut v = Vec::new();
    let len = params.sched.major_frames.get(st.current_major_frame).copied();
    let min_elapsed = st.cpus.iter().map(|c| c.tsc.wrapping_sub(st.cmsc)).min();
    if !matches!((min_elapsed, len), (Some(e), Some(l)) if e < l) {
        v.push("c1");
    }
    if st.wait_count != st.cpus.iter().filter(|c| c.in_barrier).count() {
        v.push("c2");
    }
    if st.cpus.iter().all(|c| c.in_barrier) {
        v.push("c3");
    }
    if st.cpus.iter().any(|c| !c.in_barrier && c.vmx_timer == 0) {
        v.push("timer");
    }
    v
}

impl Machine for ConcreteMachine {
    fn machine_type(&self) -> MachineType {
        kernel_machine_type(self.params.ncpus, self.params.nsubs)
    }

    fn apply(&mut self, call: &OperationCall) -> StepOutput {
        match (call.name.as_str(), call.input) {
            (INIT, _) => {
                self.c_init();
                StepOutput::Ok
            }
            (EXEC, OpInput::Cpu(c)) => self.c_execute(c),
            (TICK, OpInput::Cpu(c)) => self.c_tick(c),
            (INTERRUPT, OpInput::Interrupt { cpu, vector }) => self.c_interrupt(cpu, vector),
            _ => panic!("call {call} outside the machine type"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::ContentResolver;
    use crate::policy::parse_policy;
    use crate::toolchain::{generate, GenOptions};

    const FIG4A: &str = include_str!("../fixtures/fig4a.xml");

    fn fig4a() -> ConcreteMachine {
        let p = parse_policy(FIG4A).unwrap();
        let a = generate(
            &p,
            ContentResolver::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures")),
            &GenOptions::default(),
        )
        .unwrap();
        ConcreteMachine::new(a.params.concrete, a.pts, a.image).unwrap()
    }

    fn ticks(m: &mut ConcreteMachine, cpu: usize, n: usize) {
        for _ in 0..n {
            assert_eq!(m.c_tick(cpu), StepOutput::Ok);
            assert!(m.invariants().is_empty(), "{:?}", m.invariants());
        }
    }

    #[test]
    fn init_timers() {
        let m = fig4a();
        assert_eq!(m.state.cpus[0].vmx_timer, 40);
        assert_eq!(m.state.cpus[1].vmx_timer, 80);
        assert_eq!(m.active_subject(0), Some(0));
        assert_eq!(m.active_subject(1), Some(2));
        assert!(m.state.cpus.iter().all(|c| c.tsc == 0));
        assert_eq!(m.state.cmsc, 0);
        assert_eq!(m.state.subject_descs[3], RegisterFile::at_entry(0x1000, 0x3ff8));
    }

    #[test]
    fn minor_switch_and_barrier_release() {
        let mut m = fig4a();
        ticks(&mut m, 0, 40);
        assert_eq!(m.active_subject(0), Some(1));
        assert_eq!(m.state.cpus[0].vmx_timer, 40);
        ticks(&mut m, 1, 80);
        assert!(m.state.cpus[1].in_barrier);
        assert_eq!(m.state.wait_count, 1);
        assert_eq!(m.c_execute(1), StepOutput::Noop);
        ticks(&mut m, 0, 40);
        assert_eq!(m.state.cmsc, 80);
        assert_eq!(m.state.current_major_frame, 1);
        assert_eq!((m.state.cpus[0].vmx_timer, m.state.cpus[1].vmx_timer), (80, 60));
        assert_eq!((m.active_subject(0), m.active_subject(1)), (Some(0), Some(3)));
    }

    #[test]
    fn over_ticked_cpu_skips_minor_frames() {
        let mut m = fig4a();
        ticks(&mut m, 1, 80 + 65);
        ticks(&mut m, 0, 80);
        assert_eq!(m.state.cpus[1].minor, 1);
        assert_eq!(m.state.cpus[1].vmx_timer, 55);
        assert_eq!(m.active_subject(1), Some(2));
    }

    #[test]
    fn hypercall_and_interrupt_exits_are_transparent() {
        let mut m = fig4a();
        let before = m.current_regs(0);
        assert_eq!(m.c_interrupt(0, 33), StepOutput::Routed(1));
        assert_eq!(m.current_regs(0), before);
        assert_eq!(m.state.global_events[1], 1 << 5);
        assert_eq!(m.c_interrupt(0, 7), StepOutput::Dropped);
    }

    #[test]
    fn channel_through_shared_physical_page() {
        let mut m = fig4a();
        let pa = m.guest_write(0, 0x7000_0004, 9).unwrap();
        assert_eq!(m.read_byte(2, 0x5000_0004), Some(9));
        assert_eq!(m.state.pmem[pa as usize], 9);
        assert!(m.guest_write(2, 0x5000_0004, 1).is_err());
        assert!(m.guest_write(0, 0x9000_0000, 1).is_err());
    }

    #[test]
    fn hand_built_violations() {
        let m = fig4a();
        let mut st = m.state.clone();
        for c in &mut st.cpus {
            c.in_barrier = true;
        }
        st.wait_count = 2;
        assert!(c_invariants(&st, m.params()).contains(&"c3"));
        let mut st = m.state.clone();
        st.wait_count = 1;
        assert_eq!(c_invariants(&st, m.params()), vec!["c2"]);
    }
}
