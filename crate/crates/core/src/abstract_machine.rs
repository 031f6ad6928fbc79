//! The abstract model: one dedicated processor per subject, channel
//! memory, per-page permissions, pending events and a supervisor that keeps
//! an ideal clock per CPU next to the global frame pointers.
//!
//! A CPU is enabled when its ideal position `(ideal_cycles, ideal_maj_fp)`
//! equals the global `(cycles, maj_fp)`. The global position only advances
//! once every CPU is strictly past it, which models the barrier at the end
//! of each major frame without any waiting state.

use crate::content::{ContentError, ContentResolver};
use crate::isa::{self, AccessKind, GuestFault, GuestMemory, RegisterFile};
use crate::paging::{Permissions, PAGE_SIZE};
use crate::refinement::{
    InputDomain, Machine, MachineType, OpInput, OpSignature, OperationCall, OutputDomain, StepOutput, INIT,
};
use crate::sched::SchedDerived;
use crate::toolchain::ParamsAbstract;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

pub const EXEC: &str = "exec";
pub const TICK: &str = "tick";
pub const INTERRUPT: &str = "interrupt";

/// The operation set shared by the abstract and concrete kernel machines.
pub fn kernel_machine_type(ncpus: usize, nsubs: usize) -> MachineType {
    MachineType {
        ops: vec![
            OpSignature { name: INIT, input: InputDomain::Unit, output: OutputDomain::Ack },
            OpSignature { name: EXEC, input: InputDomain::Below(ncpus as u64), output: OutputDomain::Status },
            OpSignature { name: TICK, input: InputDomain::Below(ncpus as u64), output: OutputDomain::Ack },
            OpSignature {
                name: INTERRUPT,
                input: InputDomain::CpuVector { ncpus },
                output: OutputDomain::Routing { nsubs },
            },
        ],
    }
}

pub fn exec(cpu: usize) -> OperationCall {
    OperationCall::new(EXEC, OpInput::Cpu(cpu))
}

pub fn tick(cpu: usize) -> OperationCall {
    OperationCall::new(TICK, OpInput::Cpu(cpu))
}

pub fn interrupt(cpu: usize, vector: u8) -> OperationCall {
    OperationCall::new(INTERRUPT, OpInput::Interrupt { cpu, vector })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Running,
    ErrorHalt,
}

pub type PageBytes = Box<[u8; PAGE_SIZE as usize]>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backing {
    Private(PageBytes),
    /// Byte offset of the page in channel memory.
    Channel(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbstractPage {
    pub perms: Permissions,
    pub backing: Backing,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbstractSubject {
    pub regs: RegisterFile,
    /// Valid pages keyed by page-aligned virtual address.
    pub pages: HashMap<u64, AbstractPage>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbstractCpu {
    pub ticks: u64,
    pub min_ticks: u64,
    pub ideal_maj_fp: usize,
    pub minor_fp: usize,
    pub ideal_cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbstractState {
    pub subjects: Vec<AbstractSubject>,
    pub chmem: Vec<u8>,
    pub pending: Vec<u64>,
    pub cpus: Vec<AbstractCpu>,
    pub maj_fp: usize,
    pub cycles: u64,
    pub mode: Mode,
}

/// Where an abstract byte lives: a private page or channel memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AbstractLocation {
    Private { subject: usize, va: u64 },
    Channel(u64),
}

impl AbstractState {
    pub fn enabled_cpu(&self, cpu: usize) -> bool {
        let c = &self.cpus[cpu];
        c.ideal_cycles == self.cycles && c.ideal_maj_fp == self.maj_fp
    }

    /// Location of the byte at `va` in subject `s`, ignoring permissions.
    pub fn locate(&self, s: usize, va: u64) -> Option<AbstractLocation> {
        let page = self.subjects[s].pages.get(&(va & !(PAGE_SIZE - 1)))?;
        Some(match page.backing {
            Backing::Private(_) => AbstractLocation::Private { subject: s, va },
            Backing::Channel(off) => AbstractLocation::Channel(off + (va & (PAGE_SIZE - 1))),
        })
    }

    pub fn byte(&self, s: usize, va: u64) -> Option<u8> {
        let page = self.subjects[s].pages.get(&(va & !(PAGE_SIZE - 1)))?;
        let off = va & (PAGE_SIZE - 1);
        Some(match &page.backing {
            Backing::Private(bytes) => bytes[off as usize],
            Backing::Channel(base) => self.chmem[(base + off) as usize],
        })
    }

    /// Bytes of one valid page, through channel memory where needed.
    pub fn page_bytes(&self, s: usize, page_va: u64) -> Option<&[u8]> {
        let page = self.subjects[s].pages.get(&page_va)?;
        Some(match &page.backing {
            Backing::Private(bytes) => &bytes[..],
            Backing::Channel(base) => &self.chmem[*base as usize..(base + PAGE_SIZE) as usize],
        })
    }

    /// Digest of a subject's private memory, independent of map order.
    pub fn private_memory_hash(&self, s: usize) -> String {
        let mut pages: Vec<(&u64, &AbstractPage)> = self.subjects[s].pages.iter().collect();
        pages.sort_by_key(|(va, _)| **va);
        let mut h = Sha256::new();
        for (va, p) in pages {
            if let Backing::Private(bytes) = &p.backing {
                h.update(va.to_le_bytes());
                h.update(&bytes[..]);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Memory view of one subject.
struct SubjectView<'a> {
    pages: &'a mut HashMap<u64, AbstractPage>,
    chmem: &'a mut [u8],
    last_write: &'a mut Option<u64>,
}

impl SubjectView<'_> {
    fn slot(&mut self, va: u64, kind: AccessKind) -> Result<&mut u8, GuestFault> {
        let fault = GuestFault::Access { va, kind };
        let page = self.pages.get_mut(&(va & !(PAGE_SIZE - 1))).ok_or(fault)?;
        let allowed = match kind {
            AccessKind::Fetch => page.perms.x,
            AccessKind::Read => page.perms.r,
            AccessKind::Write => page.perms.w,
        };
        if !allowed {
            return Err(fault);
        }
        let off = va & (PAGE_SIZE - 1);
        Ok(match &mut page.backing {
            Backing::Private(bytes) => &mut bytes[off as usize],
            Backing::Channel(base) => &mut self.chmem[(*base + off) as usize],
        })
    }
}

impl GuestMemory for SubjectView<'_> {
    fn read(&mut self, va: u64, kind: AccessKind) -> Result<u8, GuestFault> {
        self.slot(va, kind).map(|b| *b)
    }

    fn write(&mut self, va: u64, value: u8) -> Result<(), GuestFault> {
        *self.slot(va, AccessKind::Write)? = value;
        *self.last_write = Some(va);
        Ok(())
    }
}

/// Builds the initial abstract state from the parameters, loading private
/// region contents through `resolver`.
pub fn a_init(u: &ParamsAbstract, resolver: &ContentResolver) -> Result<AbstractState, ContentError> {
    let mut subjects = Vec::with_capacity(u.nsubs);
    for sp in &u.subjects {
        let mut pages = HashMap::new();
        for r in &sp.regions {
            let content = match (&r.content, r.chmem_offset) {
                (_, Some(_)) => None,
                (Some(src), None) => Some(resolver.load(src, r.size)?),
                (None, None) => Some(vec![0; r.size as usize]),
            };
            for off in (0..r.size).step_by(PAGE_SIZE as usize) {
                let backing = match (&content, r.chmem_offset) {
                    (_, Some(base)) => Backing::Channel(base + off),
                    (Some(bytes), None) => {
                        let mut page: PageBytes = Box::new([0; PAGE_SIZE as usize]);
                        page.copy_from_slice(&bytes[off as usize..(off + PAGE_SIZE) as usize]);
                        Backing::Private(page)
                    }
                    (None, None) => unreachable!(),
                };
                pages.insert(r.va + off, AbstractPage { perms: r.perms, backing });
            }
        }
        subjects.push(AbstractSubject { regs: RegisterFile::at_entry(sp.entry_ip, sp.entry_sp), pages });
    }
    Ok(AbstractState {
        subjects,
        chmem: vec![0; u.chmem_size as usize],
        pending: vec![0; u.nsubs],
        cpus: vec![AbstractCpu::default(); u.ncpus],
        maj_fp: 0,
        cycles: 0,
        mode: Mode::Running,
    })
}

#[derive(Clone, Debug)]
pub struct AbstractMachine {
    params: Arc<ParamsAbstract>,
    initial: Arc<AbstractState>,
    pub state: AbstractState,
    /// Virtual address of the byte written by the last `exec`, if any.
    pub last_write: Option<(usize, u64)>,
}

impl AbstractMachine {
    pub fn new(params: ParamsAbstract, resolver: &ContentResolver) -> Result<Self, ContentError> {
        let initial = a_init(&params, resolver)?;
        Ok(Self { params: Arc::new(params), state: initial.clone(), initial: Arc::new(initial), last_write: None })
    }

    pub fn params(&self) -> &ParamsAbstract {
        &self.params
    }

    pub fn sched(&self) -> &SchedDerived {
        &self.params.sched
    }

    /// Subject scheduled on an enabled CPU, `None` while the CPU is disabled.
    pub fn active_subject(&self, cpu: usize) -> Option<usize> {
        let st = &self.state;
        st.enabled_cpu(cpu).then(|| self.sched().minor_frames(cpu, st.maj_fp)[st.cpus[cpu].minor_fp].subject)
    }

    pub fn enabled_subjects(&self) -> Vec<bool> {
        let mut e = vec![false; self.params.nsubs];
        for cpu in 0..self.params.ncpus {
            if let Some(s) = self.active_subject(cpu) {
                e[s] = true;
            }
        }
        e
    }

    pub fn a_execute(&mut self, cpu: usize) -> StepOutput {
        self.last_write = None;
        if self.state.mode != Mode::Running {
            return StepOutput::Halted;
        }
        let Some(s) = self.active_subject(cpu) else { return StepOutput::Noop };
        let st = &mut self.state;
        let sub = &mut st.subjects[s];
        isa::inject_pending(&mut sub.regs, &mut st.pending[s]);
        let mut written = None;
        let mut view = SubjectView { pages: &mut sub.pages, chmem: &mut st.chmem, last_write: &mut written };
        let result = isa::step(&mut sub.regs, &mut view);
        self.last_write = written.map(|va| (s, va));
        match result {
            Ok(_) => StepOutput::Ok,
            Err(_) => {
                st.mode = Mode::ErrorHalt;
                StepOutput::Halted
            }
        }
    }

    pub fn a_tick(&mut self, cpu: usize) -> StepOutput {
        self.last_write = None;
        if self.state.mode != Mode::Running {
            return StepOutput::Halted;
        }
        let sched = &self.params.sched;
        let l = sched.cycle_length;
        let nmf = sched.num_major_frames();
        let c = &mut self.state.cpus[cpu];
        c.ticks += 1;
        if c.ticks == l {
            c.ticks = 0;
            c.ideal_cycles += 1;
        }
        c.min_ticks += 1;
        if c.min_ticks == sched.major_frames[c.ideal_maj_fp] {
            c.min_ticks = 0;
            c.minor_fp = 0;
            c.ideal_maj_fp = (c.ideal_maj_fp + 1) % nmf;
        } else if c.min_ticks == sched.minor_frames(cpu, c.ideal_maj_fp)[c.minor_fp].deadline {
            c.minor_fp += 1;
        }
        let st = &mut self.state;
        while st.cpus.iter().all(|c| (c.ideal_cycles, c.ideal_maj_fp) > (st.cycles, st.maj_fp)) {
            st.maj_fp += 1;
            if st.maj_fp == nmf {
                st.maj_fp = 0;
                st.cycles += 1;
            }
        }
        StepOutput::Ok
    }

    pub fn a_interrupt(&mut self, vector: u8) -> StepOutput {
        self.last_write = None;
        if self.state.mode != Mode::Running {
            return StepOutput::Halted;
        }
        match self.params.routing.iter().find(|r| r.vector == vector) {
            Some(r) => {
                self.state.pending[r.subject] |= 1 << r.dest_vector;
                StepOutput::Routed(r.subject)
            }
            None => StepOutput::Dropped,
        }
    }

    pub fn invariants(&self) -> Vec<&'static str> {
        a_invariants(&self.state, &self.params.sched)
    }

    /// Writes one byte into subject `s` as if its own store had done it.
    /// Fails where the subject itself could not write.
    pub fn guest_write(&mut self, s: usize, va: u64, value: u8) -> Result<(), GuestFault> {
        let st = &mut self.state;
        let mut written = None;
        let mut view = SubjectView { pages: &mut st.subjects[s].pages, chmem: &mut st.chmem, last_write: &mut written };
        view.write(va, value)
    }

    pub fn snapshot(&self) -> AbstractSnapshot {
        let st = &self.state;
        AbstractSnapshot {
            mode: st.mode,
            maj_fp: st.maj_fp,
            cycles: st.cycles,
            cpus: st.cpus.clone(),
            subjects: st
                .subjects
                .iter()
                .enumerate()
                .map(|(s, sub)| SubjectSnapshot {
                    regs: sub.regs,
                    pending: st.pending[s],
                    pages: {
                        let mut vas: Vec<u64> = sub.pages.keys().copied().collect();
                        vas.sort_unstable();
                        vas.into_iter()
                            .map(|va| {
                                (
                                    format!("{va:#x}"),
                                    hex::encode(Sha256::digest(st.page_bytes(s, va).expect("valid page"))),
                                )
                            })
                            .collect()
                    },
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSnapshot {
    pub regs: RegisterFile,
    pub pending: u64,
    /// Page address to SHA-256 of the page as the subject sees it.
    pub pages: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractSnapshot {
    pub mode: Mode,
    pub maj_fp: usize,
    pub cycles: u64,
    pub cpus: Vec<AbstractCpu>,
    pub subjects: Vec<SubjectSnapshot>,
}

/// Evaluates the abstract state invariants and returns the violated ids.
pub fn a_invariants(st: &AbstractState, sched: &SchedDerived) -> Vec<&'static str> {
    let mut v = Vec::new();
    let l = sched.cycle_length;
    let nmf = sched.num_major_frames();
    let mut push = |id| {
        if !v.contains(&id) {
            v.push(id)
        }
    };
    for (cpu, c) in st.cpus.iter().enumerate() {
        if c.ideal_cycles < st.cycles {
            push("i1");
        }
        if c.ticks >= l {
            push("i4");
        }
        if c.ideal_maj_fp >= nmf {
            push("i3");
            continue;
        }
        if c.min_ticks >= sched.major_frames[c.ideal_maj_fp] {
            push("i3");
        }
        let minors = sched.minor_frames(cpu, c.ideal_maj_fp);
        if c.minor_fp >= minors.len() {
            push("i6");
            continue;
        }
        let start = sched.major_start(c.ideal_maj_fp);
        if l > 0 && c.ticks % l != (start + c.min_ticks) % l {
            push("i7");
        }
        if !(start <= c.ticks && c.ticks < sched.major_frame_ends[c.ideal_maj_fp]) {
            push("i15");
        }
        let lo = if c.minor_fp == 0 { 0 } else { minors[c.minor_fp - 1].deadline };
        if !(lo <= c.min_ticks && c.min_ticks < minors[c.minor_fp].deadline) {
            push("i16");
        }
    }
    let min = st.cpus.iter().map(|c| (c.ideal_cycles, c.ideal_maj_fp)).min();
    if min.is_some_and(|m| m != (st.cycles, st.maj_fp)) {
        push("i2");
    }
    if !(0..st.cpus.len()).any(|c| st.enabled_cpu(c)) {
        push("i19");
    }
    v
}

impl Machine for AbstractMachine {
    fn machine_type(&self) -> MachineType {
        kernel_machine_type(self.params.ncpus, self.params.nsubs)
    }

    fn apply(&mut self, call: &OperationCall) -> StepOutput {
        match (call.name.as_str(), call.input) {
            (INIT, _) => {
                self.state = (*self.initial).clone();
                self.last_write = None;
                StepOutput::Ok
            }
            (EXEC, OpInput::Cpu(c)) => self.a_execute(c),
            (TICK, OpInput::Cpu(c)) => self.a_tick(c),
            (INTERRUPT, OpInput::Interrupt { vector, .. }) => self.a_interrupt(vector),
            _ => panic!("call {call} outside the machine type"),
        }
    }
}
