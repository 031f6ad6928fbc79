//! Schedule tables derived from the policy: cumulative minor-frame deadlines
//! per CPU and major frame, major-frame lengths and their running ends.

use crate::policy::Policy;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MinorFrame {
    pub subject: usize,
    /// Ticks from the start of the major frame to the end of this minor frame.
    pub deadline: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedDerived {
    /// `sched_plans[cpu][major_frame]`
    pub sched_plans: Vec<Vec<Vec<MinorFrame>>>,
    pub major_frames: Vec<u64>,
    pub major_frame_ends: Vec<u64>,
    pub cycle_length: u64,
}

/// Assumes a validated policy. Major-frame lengths are taken from the
/// lowest-numbered CPU.
pub fn derive_sched(p: &Policy) -> SchedDerived {
    let mut sched_plans = vec![Vec::with_capacity(p.schedule.len()); p.ncpus];
    let mut major_frames = Vec::with_capacity(p.schedule.len());
    for mf in &p.schedule {
        let mut len = None;
        for (cpu, cpu_plans) in sched_plans.iter_mut().enumerate() {
            let mut deadline = 0;
            let plan: Vec<MinorFrame> = mf
                .cpus
                .iter()
                .find(|c| c.cpu == cpu)
                .map(|c| {
                    c.minor_frames
                        .iter()
                        .map(|m| {
                            deadline += m.ticks;
                            MinorFrame { subject: m.subject, deadline }
                        })
                        .collect()
                })
                .unwrap_or_default();
            len.get_or_insert(deadline);
            cpu_plans.push(plan);
        }
        major_frames.push(len.unwrap_or(0));
    }
    let major_frame_ends: Vec<u64> = major_frames
        .iter()
        .scan(0, |acc, &l| {
            *acc += l;
            Some(*acc)
        })
        .collect();
    let cycle_length = major_frame_ends.last().copied().unwrap_or(0);
    SchedDerived { sched_plans, major_frames, major_frame_ends, cycle_length }
}

impl SchedDerived {
    pub fn ncpus(&self) -> usize {
        self.sched_plans.len()
    }

    pub fn num_major_frames(&self) -> usize {
        self.major_frames.len()
    }

    /// Tick offset of a major frame within the cycle, `ends(mf - 1)`.
    pub fn major_start(&self, mf: usize) -> u64 {
        if mf == 0 {
            0
        } else {
            self.major_frame_ends[mf - 1]
        }
    }

    pub fn minor_frames(&self, cpu: usize, mf: usize) -> &[MinorFrame] {
        &self.sched_plans[cpu][mf]
    }

    /// Start of a minor frame relative to its major frame.
    pub fn minor_start(&self, cpu: usize, mf: usize, minor: usize) -> u64 {
        if minor == 0 {
            0
        } else {
            self.sched_plans[cpu][mf][minor - 1].deadline
        }
    }

    /// Structural invariants of the tables; returns the violated ones.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (cpu, plans) in self.sched_plans.iter().enumerate() {
            for (mf, plan) in plans.iter().enumerate() {
                if plan.is_empty() || plan.windows(2).any(|w| w[0].deadline >= w[1].deadline) || plan[0].deadline == 0 {
                    v.push(format!("deadlines not strictly increasing on cpu {cpu}, major frame {mf}"));
                }
                if plan.last().map(|m| m.deadline) != self.major_frames.get(mf).copied() {
                    v.push(format!("last deadline differs from major frame length on cpu {cpu}, major frame {mf}"));
                }
            }
        }
        if self.major_frame_ends.first().is_some_and(|&e| e == 0)
            || self.major_frame_ends.windows(2).any(|w| w[0] >= w[1])
        {
            v.push("major frame ends not strictly increasing".into());
        }
        for (i, &len) in self.major_frames.iter().enumerate() {
            if self.major_frame_ends[i] - self.major_start(i) != len {
                v.push(format!("major frame end {i} is not the running sum of lengths"));
            }
        }
        if self.major_frame_ends.last().copied().unwrap_or(0) != self.cycle_length {
            v.push("cycle length differs from last major frame end".into());
        }
        v
    }
}
