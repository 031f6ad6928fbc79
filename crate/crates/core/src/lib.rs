//! Verification toolkit for policy-generated separation kernels.
//!
//! The crate generates kernel artifacts from an XML policy (physical
//! layout, page tables, memory image, parameter tables), checks them against
//! the isolation conditions R1 to R5, and runs an abstract machine and a
//! concrete VMX-style machine in lock-step to test that the concrete system
//! refines the abstract one.

pub mod abstract_machine;
pub mod bpolicy;
pub mod checker;
pub mod concrete_machine;
pub mod content;
pub mod faults;
pub mod harness;
pub mod isa;
pub mod paging;
pub mod policy;
pub mod refinement;
pub mod sched;
pub mod synth;
pub mod toolchain;
mod xml;

pub use bpolicy::{parse_bpolicy, serialize_bpolicy, BPolicy, BPolicyError, BSubject, PhysComponent, VirtComponent};
pub use checker::{check_all, naive_check, CheckInputs, Condition, ConditionReport, Finding};
pub use content::{ContentResolver, ContentSource};
pub use faults::Fault;
pub use paging::{PagingStructureFile, Permissions, PtEntry};
pub use policy::{parse_policy, serialize_policy, validate_policy, Diagnostic, Policy, PolicyError};
pub use refinement::{check_lockstep, run_trace, Machine, OpInput, OperationCall, StepOutput, Verdict};
pub use sched::{derive_sched, SchedDerived};
pub use toolchain::{generate, Artifacts, GenOptions, Params, ParamsAbstract, ParamsConcrete};
pub use xml::XmlError;
