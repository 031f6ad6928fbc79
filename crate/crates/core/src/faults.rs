//! Fault switches for testing the checker. Each switch breaks exactly one
//! of the conditions R1 to R5 and leaves the others intact.

use crate::bpolicy::BPolicy;
use crate::checker::Condition;
use crate::paging::{PagingStructureFile, PtEntry, ADDR_MASK, ENTRIES_PER_TABLE, PAGE_SIZE};
use crate::policy::Policy;
use crate::toolchain::{channel_phys_name, ParamsConcrete};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Place one channel's physical component on top of another channel.
    PhysOverlap,
    /// Undeclared sharing: clear the channel flag on one attachment of a
    /// channel that has a writer.
    DropChannelFlag,
    /// Point a writable private leaf at another subject's private page.
    PtLeafRedirect,
    /// Mark an unused leaf entry present.
    SpuriousPresent,
    /// Flip one byte of a subject component in the image.
    ImageByte,
    /// Move one minor-frame deadline by a tick in the concrete parameters.
    SchedDeadline,
}

impl Fault {
    pub const ALL: [Fault; 6] = [
        Fault::PhysOverlap,
        Fault::DropChannelFlag,
        Fault::PtLeafRedirect,
        Fault::SpuriousPresent,
        Fault::ImageByte,
        Fault::SchedDeadline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fault::PhysOverlap => "overlap",
            Fault::DropChannelFlag => "drop-channel-flag",
            Fault::PtLeafRedirect => "pt-redirect",
            Fault::SpuriousPresent => "spurious-present",
            Fault::ImageByte => "image-byte",
            Fault::SchedDeadline => "sched-deadline",
        }
    }

    /// The single condition this switch violates.
    pub fn condition(self) -> Condition {
        match self {
            Fault::PhysOverlap | Fault::DropChannelFlag | Fault::PtLeafRedirect => Condition::R1,
            Fault::SpuriousPresent => Condition::R3,
            Fault::ImageByte => Condition::R4,
            Fault::SchedDeadline => Condition::R5,
        }
    }

    pub(crate) fn stage(self) -> Stage {
        match self {
            Fault::PhysOverlap | Fault::DropChannelFlag => Stage::BPolicy,
            Fault::PtLeafRedirect | Fault::SpuriousPresent => Stage::PageTables,
            Fault::ImageByte => Stage::Image,
            Fault::SchedDeadline => Stage::Params,
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("unknown fault {0:?}; expected one of overlap, drop-channel-flag, pt-redirect, spurious-present, image-byte, sched-deadline")]
pub struct UnknownFault(pub String);

impl FromStr for Fault {
    type Err = UnknownFault;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fault::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| UnknownFault(s.into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stage {
    BPolicy,
    PageTables,
    Image,
    Params,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("fault {fault} cannot be applied: {reason}")]
pub struct FaultError {
    pub fault: Fault,
    pub reason: &'static str,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedFault {
    pub fault: Fault,
    pub description: String,
}

pub(crate) fn fault_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6661_756c_7473)
}

fn not_applicable(fault: Fault, reason: &'static str) -> FaultError {
    FaultError { fault, reason }
}

pub(crate) fn apply_bpolicy(
    f: Fault,
    p: &Policy,
    b: &mut BPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<AppliedFault, FaultError> {
    match f {
        Fault::PhysOverlap => {
            let chans: Vec<usize> = p
                .channels
                .iter()
                .filter_map(|c| b.physical.iter().position(|pc| pc.name == channel_phys_name(&c.name)))
                .collect();
            if chans.len() < 2 {
                return Err(not_applicable(f, "needs two channels"));
            }
            let picked: Vec<usize> = chans.choose_multiple(rng, 2).copied().collect();
            // move the smaller onto the larger so no third component is touched
            let (mover, host) = if b.physical[picked[0]].size <= b.physical[picked[1]].size {
                (picked[0], picked[1])
            } else {
                (picked[1], picked[0])
            };
            b.physical[mover].address = b.physical[host].address;
            Ok(AppliedFault {
                fault: f,
                description: format!("{} moved onto {}", b.physical[mover].name, b.physical[host].name),
            })
        }
        Fault::DropChannelFlag => {
            let writers: BTreeSet<&str> = b
                .subjects
                .iter()
                .flat_map(|s| &s.virt)
                .filter(|v| v.channel && v.perms.w)
                .map(|v| v.physical.as_str())
                .collect();
            let candidates: Vec<(usize, usize)> = b
                .subjects
                .iter()
                .enumerate()
                .flat_map(|(s, bs)| {
                    bs.virt
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| v.channel && writers.contains(v.physical.as_str()))
                        .map(move |(i, _)| (s, i))
                })
                .collect();
            let &(s, i) = candidates.choose(rng).ok_or_else(|| not_applicable(f, "no channel with a writer"))?;
            b.subjects[s].virt[i].channel = false;
            let bs = &b.subjects[s];
            Ok(AppliedFault {
                fault: f,
                description: format!("channel flag cleared on {}:{}", bs.name, bs.virt[i].logical),
            })
        }
        _ => unreachable!("not a B-policy fault"),
    }
}

pub(crate) fn apply_page_tables(
    f: Fault,
    b: &BPolicy,
    pts: &mut [PagingStructureFile],
    rng: &mut ChaCha8Rng,
) -> Result<AppliedFault, FaultError> {
    match f {
        Fault::PtLeafRedirect => {
            let private_writable = |s: usize| -> Vec<(u64, u64)> {
                b.pages(s).into_iter().filter(|pg| !pg.channel && pg.perms.w).map(|pg| (pg.va, pg.pa)).collect()
            };
            let per_subject: Vec<Vec<(u64, u64)>> = (0..b.subjects.len()).map(private_writable).collect();
            let sources: Vec<usize> = (0..per_subject.len()).filter(|&s| !per_subject[s].is_empty()).collect();
            let &s = sources.choose(rng).ok_or_else(|| not_applicable(f, "no writable private page"))?;
            let &(va, pa) = per_subject[s].choose(rng).expect("non-empty");
            let victims: Vec<&(u64, u64)> =
                sources.iter().filter(|&&o| o != s).flat_map(|&o| &per_subject[o]).collect();
            let target = victims.choose(rng).map_or(pa + PAGE_SIZE, |&&(_, vpa)| vpa);
            let walk = pts[s].walk(va).map_err(|_| not_applicable(f, "page table does not walk"))?;
            let leaf = walk.entries[3];
            let e = pts[s].entries[leaf];
            pts[s].entries[leaf] = (e & !ADDR_MASK) | target;
            Ok(AppliedFault {
                fault: f,
                description: format!("{}: va {va:#x} now maps {target:#x} instead of {pa:#x}", b.subjects[s].name),
            })
        }
        Fault::SpuriousPresent => {
            let mut candidates = Vec::new();
            for (s, pt) in pts.iter().enumerate() {
                let leaf_tables: BTreeSet<usize> = b
                    .pages(s)
                    .iter()
                    .filter_map(|pg| pt.walk(pg.va).ok())
                    .filter(|w| w.len == 4)
                    .map(|w| w.entries[3] / ENTRIES_PER_TABLE)
                    .collect();
                for t in leaf_tables {
                    let base = t * ENTRIES_PER_TABLE;
                    candidates.extend((base..base + ENTRIES_PER_TABLE).filter(|&i| pt.entries[i] == 0).map(|i| (s, i)));
                }
            }
            let &(s, i) = candidates.choose(rng).ok_or_else(|| not_applicable(f, "no unused leaf entry"))?;
            let pt = &mut pts[s];
            pt.entries[i] = PtEntry::encode(pt.pt_base, true, false, true).expect("pt_base is aligned").0;
            Ok(AppliedFault { fault: f, description: format!("{}: leaf entry {i} set present", b.subjects[s].name) })
        }
        _ => unreachable!("not a page-table fault"),
    }
}

pub(crate) fn apply_image(
    f: Fault,
    b: &BPolicy,
    image: &mut [u8],
    rng: &mut ChaCha8Rng,
) -> Result<AppliedFault, FaultError> {
    let private: BTreeSet<&str> =
        b.subjects.iter().flat_map(|s| &s.virt).filter(|v| !v.channel).map(|v| v.physical.as_str()).collect();
    let comps: Vec<_> = b.physical.iter().filter(|c| private.contains(c.name.as_str())).collect();
    let c = comps.choose(rng).ok_or_else(|| not_applicable(f, "no subject component"))?;
    let addr = c.address + rng.gen_range(0..c.size);
    image[addr as usize] ^= 0xa5;
    Ok(AppliedFault { fault: f, description: format!("image byte {addr:#x} in {} flipped", c.name) })
}

pub(crate) fn apply_params(
    f: Fault,
    params: &mut ParamsConcrete,
    rng: &mut ChaCha8Rng,
) -> Result<AppliedFault, FaultError> {
    let plans = &mut params.sched.sched_plans;
    let mut inner = Vec::new();
    let mut last = Vec::new();
    for (cpu, frames) in plans.iter().enumerate() {
        for (mf, minors) in frames.iter().enumerate() {
            for i in 0..minors.len() {
                if i + 1 < minors.len() {
                    inner.push((cpu, mf, i));
                } else {
                    last.push((cpu, mf, i));
                }
            }
        }
    }
    let pool = if inner.is_empty() { &last } else { &inner };
    let &(cpu, mf, i) = pool.choose(rng).ok_or_else(|| not_applicable(f, "empty schedule"))?;
    plans[cpu][mf][i].deadline += 1;
    Ok(AppliedFault {
        fault: f,
        description: format!("deadline of cpu {cpu}, major frame {mf}, minor frame {i} moved by one tick"),
    })
}
