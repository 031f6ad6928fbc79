//! Machines as named operations over state, and lock-step refinement checking.
//!
//! A machine is a deterministic, total transition function per operation.
//! Two machines can be checked against each other when they share a
//! [`MachineType`]: both are initialized, every operation of a trace is
//! applied to both, outputs must agree and a gluing predicate over the pair
//! of states must hold after `init` and after every joint step.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const INIT: &str = "init";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpInput {
    None,
    Cpu(usize),
    Interrupt { cpu: usize, vector: u8 },
    Element(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperationCall {
    pub name: String,
    pub input: OpInput,
}

impl OperationCall {
    pub fn new(name: impl Into<String>, input: OpInput) -> Self {
        Self { name: name.into(), input }
    }

    pub fn init() -> Self {
        Self::new(INIT, OpInput::None)
    }
}

impl fmt::Display for OperationCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.input {
            OpInput::None => write!(f, "{}", self.name),
            OpInput::Cpu(c) => write!(f, "{}(cpu={c})", self.name),
            OpInput::Interrupt { cpu, vector } => write!(f, "{}(cpu={cpu}, vector={vector})", self.name),
            OpInput::Element(x) => write!(f, "{}({x})", self.name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StepOutput {
    Ok,
    Noop,
    Halted,
    Bool(bool),
    Routed(usize),
    Dropped,
}

/// Input domain of an operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputDomain {
    Unit,
    /// `0..n`
    Below(u64),
    /// A CPU below `ncpus` together with any 8-bit vector.
    CpuVector {
        ncpus: usize,
    },
}

impl InputDomain {
    pub fn contains(&self, input: &OpInput) -> bool {
        match (self, input) {
            (InputDomain::Unit, OpInput::None) => true,
            (InputDomain::Below(n), OpInput::Cpu(c)) => (*c as u64) < *n,
            (InputDomain::Below(n), OpInput::Element(x)) => x < n,
            (InputDomain::CpuVector { ncpus }, OpInput::Interrupt { cpu, .. }) => cpu < ncpus,
            _ => false,
        }
    }
}

/// Output domain of an operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OutputDomain {
    Ack,
    Bool,
    /// ok / noop / halted
    Status,
    /// routed(subject below `nsubs`) / dropped
    Routing {
        nsubs: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OpSignature {
    pub name: &'static str,
    pub input: InputDomain,
    pub output: OutputDomain,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MachineType {
    pub ops: Vec<OpSignature>,
}

impl MachineType {
    pub fn signature(&self, name: &str) -> Option<&OpSignature> {
        self.ops.iter().find(|s| s.name == name)
    }
}

pub trait Machine {
    fn machine_type(&self) -> MachineType;
    /// Applies one operation. Callers validate the call against
    /// [`Machine::machine_type`] first.
    fn apply(&mut self, call: &OperationCall) -> StepOutput;
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("operation {index} ({name}) is not part of the machine type")]
    UnknownOperation { index: usize, name: String },
    #[error("operation {index} ({call}) has an input outside its domain")]
    InputOutOfDomain { index: usize, call: String },
}

fn validate_trace(ty: &MachineType, trace: &[OperationCall]) -> Result<(), TraceError> {
    for (index, call) in trace.iter().enumerate() {
        let sig =
            ty.signature(&call.name).ok_or_else(|| TraceError::UnknownOperation { index, name: call.name.clone() })?;
        if !sig.input.contains(&call.input) {
            return Err(TraceError::InputOutOfDomain { index, call: call.to_string() });
        }
    }
    Ok(())
}

fn with_init(trace: &[OperationCall]) -> Vec<OperationCall> {
    match trace.first() {
        Some(first) if first.name == INIT => trace.to_vec(),
        _ => std::iter::once(OperationCall::init()).chain(trace.iter().cloned()).collect(),
    }
}

/// Runs an initialized trace. A trace that does not start with `init` gets
/// it prepended. The whole trace is validated before anything executes.
pub fn run_trace<M: Machine>(machine: &mut M, trace: &[OperationCall]) -> Result<Vec<StepOutput>, TraceError> {
    let trace = with_init(trace);
    validate_trace(&machine.machine_type(), &trace)?;
    Ok(trace.iter().map(|call| machine.apply(call)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Divergence {
    OutputMismatch { abstract_output: StepOutput, concrete_output: StepOutput },
    GlueViolation { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass {
        steps: usize,
    },
    /// `step` is 1-based over the initialized trace; `init` is step 1.
    Fail {
        step: usize,
        divergence: Divergence,
    },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LockstepError {
    #[error("machines do not share a machine type")]
    TypeMismatch,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Lock-step check with a per-step observer, called after both machines
/// took a step and before the glue predicate is evaluated.
pub fn check_lockstep_observed<A, C, G, O>(
    abs: &mut A,
    conc: &mut C,
    trace: &[OperationCall],
    mut glue: G,
    mut observe: O,
) -> Result<Verdict, LockstepError>
where
    A: Machine,
    C: Machine,
    G: FnMut(&A, &C) -> Result<(), String>,
    O: FnMut(usize, &OperationCall, StepOutput, StepOutput, &A, &C),
{
    let ty = abs.machine_type();
    if ty != conc.machine_type() {
        return Err(LockstepError::TypeMismatch);
    }
    let trace = with_init(trace);
    validate_trace(&ty, &trace)?;

    for (i, call) in trace.iter().enumerate() {
        let step = i + 1;
        let a = abs.apply(call);
        let c = conc.apply(call);
        observe(step, call, a, c, abs, conc);
        if a != c {
            return Ok(Verdict::Fail {
                step,
                divergence: Divergence::OutputMismatch { abstract_output: a, concrete_output: c },
            });
        }
        if let Err(reason) = glue(abs, conc) {
            return Ok(Verdict::Fail { step, divergence: Divergence::GlueViolation { reason } });
        }
    }
    Ok(Verdict::Pass { steps: trace.len() })
}

pub fn check_lockstep<A, C, G>(
    abs: &mut A,
    conc: &mut C,
    trace: &[OperationCall],
    glue: G,
) -> Result<Verdict, LockstepError>
where
    A: Machine,
    C: Machine,
    G: FnMut(&A, &C) -> Result<(), String>,
{
    check_lockstep_observed(abs, conc, trace, glue, |_, _, _, _, _, _| {})
}

// --- The parametric set machine ------------------------------------------

fn set_machine_type(universe: usize) -> MachineType {
    let n = universe as u64;
    MachineType {
        ops: vec![
            OpSignature { name: INIT, input: InputDomain::Unit, output: OutputDomain::Ack },
            OpSignature { name: "add", input: InputDomain::Below(n), output: OutputDomain::Ack },
            OpSignature { name: "elem", input: InputDomain::Below(n), output: OutputDomain::Bool },
        ],
    }
}

/// Parameters of the concrete set machine: a universe size and the array
/// permuting where element `x` is stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetMachineParams {
    pub usize: usize,
    pub t: Vec<usize>,
}

impl SetMachineParams {
    pub fn new(t: Vec<usize>) -> Self {
        Self { usize: t.len(), t }
    }

    /// `t` has the declared length and stays inside the universe.
    pub fn well_formed(&self) -> bool {
        self.t.len() == self.usize && self.t.iter().all(|&v| v < self.usize)
    }
}

/// The condition under which the concrete set machine refines the abstract
/// one: equal universes and an injective storage map.
pub fn check_set_condition(concrete: &SetMachineParams, abs_usize: usize) -> bool {
    if concrete.usize != abs_usize || !concrete.well_formed() {
        return false;
    }
    let mut seen = vec![false; concrete.usize];
    concrete.t.iter().all(|&v| !std::mem::replace(&mut seen[v], true))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetMachine {
    params: SetMachineParams,
    pub s: Vec<bool>,
}

impl SetMachine {
    /// Panics if `t` points outside the universe.
    pub fn new(params: SetMachineParams) -> Self {
        assert!(params.well_formed(), "T must map into 0..Usize");
        let s = vec![false; params.usize];
        Self { params, s }
    }

    pub fn params(&self) -> &SetMachineParams {
        &self.params
    }
}

impl Machine for SetMachine {
    fn machine_type(&self) -> MachineType {
        set_machine_type(self.params.usize)
    }

    fn apply(&mut self, call: &OperationCall) -> StepOutput {
        let x = match call.input {
            OpInput::Element(x) => x as usize,
            _ => 0,
        };
        match call.name.as_str() {
            INIT => {
                self.s.iter_mut().for_each(|b| *b = false);
                StepOutput::Ok
            }
            "add" => {
                self.s[self.params.t[x]] = true;
                StepOutput::Ok
            }
            "elem" => StepOutput::Bool(self.s[self.params.t[x]]),
            other => unreachable!("unvalidated operation {other}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbstractSetMachine {
    pub abs_s: Vec<bool>,
}

impl AbstractSetMachine {
    pub fn new(abs_usize: usize) -> Self {
        Self { abs_s: vec![false; abs_usize] }
    }
}

impl Machine for AbstractSetMachine {
    fn machine_type(&self) -> MachineType {
        set_machine_type(self.abs_s.len())
    }

    fn apply(&mut self, call: &OperationCall) -> StepOutput {
        let x = match call.input {
            OpInput::Element(x) => x as usize,
            _ => 0,
        };
        match call.name.as_str() {
            INIT => {
                self.abs_s.iter_mut().for_each(|b| *b = false);
                StepOutput::Ok
            }
            "add" => {
                self.abs_s[x] = true;
                StepOutput::Ok
            }
            "elem" => StepOutput::Bool(self.abs_s[x]),
            other => unreachable!("unvalidated operation {other}"),
        }
    }
}

/// `forall x < Usize: S[T[x]] = absS[x]`
pub fn set_glue(abs: &AbstractSetMachine, conc: &SetMachine) -> Result<(), String> {
    for (x, &stored) in conc.params.t.iter().enumerate() {
        if conc.s[stored] != abs.abs_s[x] {
            return Err(format!("S[T[{x}]] = {} but absS[{x}] = {}", conc.s[stored], abs.abs_s[x]));
        }
    }
    Ok(())
}

pub fn add(x: u64) -> OperationCall {
    OperationCall::new("add", OpInput::Element(x))
}

pub fn elem(x: u64) -> OperationCall {
    OperationCall::new("elem", OpInput::Element(x))
}
