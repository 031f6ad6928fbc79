//! Checking condition R on generated artifacts.
//!
//! R1 covers physical overlap, undeclared sharing and page tables agreeing
//! with the B-policy; R2 permissions; R3 absence of mappings for invalid
//! addresses; R4 initial memory contents; R5 the kernel parameter tables.
//! [`naive_check`] evaluates R1 to R4 by brute force over every page of a
//! bounded address space and serves as the reference for the fast checks.

use crate::bpolicy::BPolicy;
use crate::content::ContentResolver;
use crate::paging::{PagingStructureFile, PAGE_SIZE};
use crate::policy::Policy;
use crate::sched::derive_sched;
use crate::toolchain::{pt_file_name, ParamsConcrete};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::time::Instant;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    R1,
    R2,
    R3,
    R4,
    R5,
}

impl Condition {
    pub const ALL: [Condition; 5] = [Condition::R1, Condition::R2, Condition::R3, Condition::R4, Condition::R5];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locus {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub condition: Condition,
    pub message: String,
    pub locus: Locus,
}

impl Finding {
    fn new(condition: Condition, message: impl Into<String>, locus: Locus) -> Self {
        Self { condition, message: message.into(), locus }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.condition, self.message)?;
        let l = &self.locus;
        if let Some(s) = &l.subject {
            write!(f, " subject={s}")?;
        }
        if let Some(c) = &l.component {
            write!(f, " component={c}")?;
        }
        if let Some(a) = l.address {
            write!(f, " address={a:#x}")?;
        }
        if let Some(e) = l.entry {
            write!(f, " entry={e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub pass: bool,
    pub findings: Vec<Finding>,
    pub millis: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub conditions: BTreeMap<Condition, ConditionResult>,
}

impl ConditionReport {
    fn record(&mut self, c: Condition, findings: Vec<Finding>, started: Instant) {
        debug_assert!(findings.iter().all(|f| f.condition == c));
        let millis = started.elapsed().as_secs_f64() * 1e3;
        self.conditions.insert(c, ConditionResult { pass: findings.is_empty(), findings, millis });
    }

    pub fn passed(&self) -> bool {
        self.conditions.values().all(|r| r.pass)
    }

    pub fn pass(&self, c: Condition) -> Option<bool> {
        self.conditions.get(&c).map(|r| r.pass)
    }

    pub fn failed_conditions(&self) -> Vec<Condition> {
        self.conditions.iter().filter(|(_, r)| !r.pass).map(|(c, _)| *c).collect()
    }

    pub fn findings(&self) -> impl Iterator<Item = &Finding> {
        self.conditions.values().flat_map(|r| &r.findings)
    }

    pub fn total_millis(&self) -> f64 {
        self.conditions.values().map(|r| r.millis).sum()
    }

    /// Per-condition verdicts for the conditions both reports evaluated.
    pub fn verdict_differences(&self, other: &ConditionReport) -> Vec<Condition> {
        self.conditions
            .iter()
            .filter_map(|(c, r)| other.conditions.get(c).filter(|o| o.pass != r.pass).map(|_| *c))
            .collect()
    }
}

pub const ILLEGAL_SHARING: &str = "Illegal sharing detected.";
pub const ADDRESS_MISMATCH: &str = "Address mismatch";
pub const PERMISSION_MISMATCH: &str = "Rd/Write/Exec mismatch.";
pub const INVALID_ENTRY: &str = "Invalid Page Table Entry";

/// Pairs of half-open intervals `[start, end)` that share at least one
/// address. Sort by start, then sweep with the list of still-open intervals.
pub fn overlapping_pairs(intervals: &[(u64, u64)]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..intervals.len()).filter(|&i| intervals[i].0 < intervals[i].1).collect();
    order.sort_by_key(|&i| (intervals[i].0, intervals[i].1, i));
    let mut open: Vec<usize> = Vec::new();
    let mut pairs = Vec::new();
    for &i in &order {
        let (start, _) = intervals[i];
        open.retain(|&j| intervals[j].1 > start);
        for &j in &open {
            pairs.push((j.min(i), j.max(i)));
        }
        open.push(i);
    }
    pairs.sort_unstable();
    pairs
}

pub fn check_phys_overlap(b: &BPolicy) -> Vec<Finding> {
    let iv: Vec<(u64, u64)> = b.physical.iter().map(|c| (c.address, c.end())).collect();
    overlapping_pairs(&iv)
        .into_iter()
        .map(|(i, j)| {
            let (a, c) = (&b.physical[i], &b.physical[j]);
            Finding::new(
                Condition::R1,
                ILLEGAL_SHARING,
                Locus {
                    component: Some(format!("{} / {}", a.name, c.name)),
                    address: Some(a.address.max(c.address)),
                    ..Locus::default()
                },
            )
        })
        .collect()
}

/// Overlaps of virtual components in physical memory. A pair is allowed
/// when both sides are channel attachments or neither side is writable.
pub fn check_virt_overlap(b: &BPolicy) -> Vec<Finding> {
    let index = b.phys_index();
    let mut items = Vec::new();
    for (s, bs) in b.subjects.iter().enumerate() {
        for v in &bs.virt {
            if let Some(&pi) = index.get(v.physical.as_str()) {
                let pa = b.physical[pi].address;
                items.push((s, v, (pa, pa + v.size)));
            }
        }
    }
    let iv: Vec<(u64, u64)> = items.iter().map(|x| x.2).collect();
    overlapping_pairs(&iv)
        .into_iter()
        .filter(|&(i, j)| {
            let (a, c) = (items[i].1, items[j].1);
            !(a.channel && c.channel) && (a.perms.w || c.perms.w)
        })
        .map(|(i, j)| {
            let (sa, a, ra) = &items[i];
            let (sc, c, rc) = &items[j];
            Finding::new(
                Condition::R1,
                ILLEGAL_SHARING,
                Locus {
                    subject: Some(format!("{} / {}", b.subjects[*sa].name, b.subjects[*sc].name)),
                    component: Some(format!("{} / {}", a.logical, c.logical)),
                    address: Some(ra.0.max(rc.0)),
                    ..Locus::default()
                },
            )
        })
        .collect()
}

/// Every valid page translates to its B-policy address. Assumes R3 is
/// checked separately.
pub fn check_pt_match(b: &BPolicy, pts: &[PagingStructureFile]) -> Vec<Finding> {
    let mut out = Vec::new();
    for (s, pt) in pts.iter().enumerate().take(b.subjects.len()) {
        for pg in b.pages(s) {
            let ok = matches!(pt.translate(pg.va), Ok(Some(t)) if t.pa == pg.pa);
            if !ok {
                out.push(Finding::new(
                    Condition::R1,
                    ADDRESS_MISMATCH,
                    Locus {
                        subject: Some(b.subjects[s].name.clone()),
                        component: Some(pg.phys.name.clone()),
                        address: Some(pg.va),
                        ..Locus::default()
                    },
                ));
            }
        }
    }
    out
}

pub fn check_permissions(b: &BPolicy, pts: &[PagingStructureFile]) -> Vec<Finding> {
    let mut out = Vec::new();
    for (s, pt) in pts.iter().enumerate().take(b.subjects.len()) {
        for pg in b.pages(s) {
            if let Ok(Some(t)) = pt.translate(pg.va) {
                if t.perms != pg.perms {
                    out.push(Finding::new(
                        Condition::R2,
                        PERMISSION_MISMATCH,
                        Locus {
                            subject: Some(b.subjects[s].name.clone()),
                            component: Some(pg.phys.name.clone()),
                            address: Some(pg.va),
                            ..Locus::default()
                        },
                    ));
                }
            }
        }
    }
    out
}

/// Marks the entries used by the walks of all valid pages, then reports
/// every present entry left unmarked. Linear in used pages plus file size.
pub fn check_validity(b: &BPolicy, pts: &[PagingStructureFile]) -> Vec<Finding> {
    let mut out = Vec::new();
    for (s, pt) in pts.iter().enumerate().take(b.subjects.len()) {
        let mut marked = vec![0u64; pt.entries.len().div_ceil(64)];
        for v in &b.subjects[s].virt {
            for va in (v.va..v.va + v.size).step_by(PAGE_SIZE as usize) {
                if let Ok((walk, _)) = pt.walk_partial(va) {
                    for &e in walk.visited() {
                        marked[e / 64] |= 1 << (e % 64);
                    }
                }
            }
        }
        for (i, &e) in pt.entries.iter().enumerate() {
            if e & 1 != 0 && marked[i / 64] & (1 << (i % 64)) == 0 {
                out.push(Finding::new(
                    Condition::R3,
                    INVALID_ENTRY,
                    Locus { subject: Some(b.subjects[s].name.clone()), entry: Some(i), ..Locus::default() },
                ));
            }
        }
    }
    out
}

/// Each physical component's bytes in the image equal its declared source.
pub fn check_content(b: &BPolicy, image: &[u8], resolver: &ContentResolver) -> Vec<Finding> {
    let mut out = Vec::new();
    for c in &b.physical {
        let locus = |address| Locus { component: Some(c.name.clone()), address: Some(address), ..Locus::default() };
        let expected = match resolver.load(&c.content, c.size) {
            Ok(bytes) => bytes,
            Err(e) => {
                out.push(Finding::new(Condition::R4, format!("content source unusable: {e}"), locus(c.address)));
                continue;
            }
        };
        let Some(actual) = image.get(c.address as usize..c.end() as usize) else {
            out.push(Finding::new(Condition::R4, "component extends beyond the image", locus(c.address)));
            continue;
        };
        if actual != expected.as_slice() {
            let off = actual.iter().zip(&expected).position(|(a, e)| a != e).expect("slices differ");
            out.push(Finding::new(Condition::R4, "Content mismatch", locus(c.address + off as u64)));
        }
    }
    out
}

/// Recomputes the schedule, routing and subject tables from the policy and
/// compares them with the concrete parameters.
pub fn check_structures(p: &Policy, params: &ParamsConcrete) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut diff = |what: String| out.push(Finding::new(Condition::R5, format!("{what} mismatch"), Locus::default()));
    let d = derive_sched(p);
    if params.nsubs != p.subjects.len() {
        diff("nsubs".into());
    }
    if params.ncpus != p.ncpus {
        diff("ncpus".into());
    }
    if d.sched_plans.len() != params.sched.sched_plans.len() {
        diff("sched_plans cpu count".into());
    }
    for (cpu, (want, got)) in d.sched_plans.iter().zip(&params.sched.sched_plans).enumerate() {
        if want.len() != got.len() {
            diff(format!("sched_plans[{cpu}] major frame count"));
            continue;
        }
        for (mf, (w, g)) in want.iter().zip(got).enumerate() {
            if w.len() != g.len() {
                diff(format!("sched_plans[{cpu}][{mf}] minor frame count"));
                continue;
            }
            for (i, (wm, gm)) in w.iter().zip(g).enumerate() {
                if wm != gm {
                    diff(format!("sched_plans[{cpu}][{mf}][{i}]"));
                }
            }
        }
    }
    if d.major_frames != params.sched.major_frames {
        diff("major_frames".into());
    }
    if d.major_frame_ends != params.sched.major_frame_ends {
        diff("major_frame_ends".into());
    }
    if d.cycle_length != params.sched.cycle_length {
        diff("cycle length".into());
    }
    let mut want_routing = p.routing.clone();
    let mut got_routing = params.vector_routing.clone();
    want_routing.sort_by_key(|r| r.vector);
    got_routing.sort_by_key(|r| r.vector);
    if want_routing.len() != got_routing.len() {
        diff("vector_routing length".into());
    }
    for (w, g) in want_routing.iter().zip(&got_routing) {
        if w != g {
            diff(format!("vector_routing[{}]", w.vector));
        }
    }
    if params.subject_specs.len() != p.subjects.len() {
        diff("subject_specs length".into());
    }
    for (s, spec) in p.subjects.iter().zip(&params.subject_specs) {
        if spec.name != s.name
            || spec.cpu != s.cpu
            || spec.vmcs != s.id
            || spec.entry_ip != s.entry_ip
            || spec.entry_sp != s.entry_sp
            || spec.pt_file != pt_file_name(&s.name)
        {
            diff(format!("subject_specs[{}]", s.id));
        }
    }
    out
}

/// Inputs to [`check_all`].
#[derive(Clone, Copy)]
pub struct CheckInputs<'a> {
    pub policy: &'a Policy,
    pub bpolicy: &'a BPolicy,
    pub pts: &'a [PagingStructureFile],
    pub image: &'a [u8],
    pub params: &'a ParamsConcrete,
    pub resolver: &'a ContentResolver,
}

pub fn check_all(i: CheckInputs) -> ConditionReport {
    let mut report = ConditionReport::default();

    let t = Instant::now();
    let mut r1 = check_phys_overlap(i.bpolicy);
    r1.extend(check_virt_overlap(i.bpolicy));
    r1.extend(check_pt_match(i.bpolicy, i.pts));
    if i.pts.len() != i.bpolicy.subjects.len() {
        r1.push(Finding::new(Condition::R1, "page-table file missing", Locus::default()));
    }
    report.record(Condition::R1, r1, t);

    let t = Instant::now();
    report.record(Condition::R2, check_permissions(i.bpolicy, i.pts), t);
    let t = Instant::now();
    report.record(Condition::R3, check_validity(i.bpolicy, i.pts), t);
    let t = Instant::now();
    report.record(Condition::R4, check_content(i.bpolicy, i.image, i.resolver), t);
    let t = Instant::now();
    report.record(Condition::R5, check_structures(i.policy, i.params), t);
    report
}

pub const NAIVE_BOUND_LIMIT: u64 = 1 << 25;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum NaiveError {
    #[error("bound {0:#x} exceeds the naive checker limit of 2^25")]
    BoundTooLarge(u64),
    #[error("subject {subject} has a valid page at {va:#x}, beyond the bound")]
    PageBeyondBound { subject: String, va: u64 },
}

/// Brute-force R1 to R4 over every page-aligned address below `bound`.
///
/// R1 is evaluated directly on translations: every valid address translates
/// to its B-policy address; two valid addresses translating to the same
/// place must be channel attachments of the same channel offset, or both
/// read-only; and equal channel offsets translate equally. R4 reads the
/// image through the B-policy address of each valid page.
pub fn naive_check(
    b: &BPolicy,
    pts: &[PagingStructureFile],
    image: &[u8],
    resolver: &ContentResolver,
    bound: u64,
) -> Result<ConditionReport, NaiveError> {
    if bound > NAIVE_BOUND_LIMIT {
        return Err(NaiveError::BoundTooLarge(bound));
    }
    let pages: Vec<HashMap<u64, _>> =
        (0..b.subjects.len()).map(|s| b.pages(s).into_iter().map(|pg| (pg.va, pg)).collect()).collect();
    for (s, map) in pages.iter().enumerate() {
        if let Some(&va) = map.keys().find(|&&va| va >= bound) {
            return Err(NaiveError::PageBeyondBound { subject: b.subjects[s].name.clone(), va });
        }
    }
    let subject = |s: usize| Some(b.subjects[s].name.clone());
    let at = |s: usize, va: u64| Locus { subject: subject(s), address: Some(va), ..Locus::default() };
    let mut report = ConditionReport::default();

    // R1
    let t = Instant::now();
    let mut r1 = Vec::new();
    let mut by_pa: HashMap<u64, Vec<(usize, u64)>> = HashMap::new();
    // (channel, offset) -> (subject, va, pa)
    type ChannelUses<'a> = HashMap<(&'a str, u64), Vec<(usize, u64, u64)>>;
    let mut by_cmap: ChannelUses = HashMap::new();
    for (s, pt) in pts.iter().enumerate().take(b.subjects.len()) {
        for va in (0..bound).step_by(PAGE_SIZE as usize) {
            let Some(pg) = pages[s].get(&va) else { continue };
            match pt.translate(va) {
                Ok(Some(tr)) => {
                    if tr.pa != pg.pa {
                        r1.push(Finding::new(Condition::R1, "translation differs from B-policy", at(s, va)));
                    }
                    by_pa.entry(tr.pa).or_default().push((s, va));
                    if pg.channel {
                        by_cmap.entry((pg.phys.name.as_str(), pg.offset)).or_default().push((s, va, tr.pa));
                    }
                }
                _ => r1.push(Finding::new(Condition::R1, "valid address does not translate", at(s, va))),
            }
        }
    }
    let mut shared: Vec<_> = by_pa.into_iter().filter(|(_, v)| v.len() > 1).collect();
    shared.sort_unstable();
    for (pa, users) in shared {
        for (i, &(s1, va1)) in users.iter().enumerate() {
            for &(s2, va2) in &users[i + 1..] {
                let (p1, p2) = (&pages[s1][&va1], &pages[s2][&va2]);
                let same_channel = p1.channel && p2.channel && p1.phys.name == p2.phys.name && p1.offset == p2.offset;
                let read_only = !p1.perms.w && !p2.perms.w;
                if !same_channel && !read_only {
                    r1.push(Finding::new(
                        Condition::R1,
                        format!(
                            "{}:{va1:#x} and {}:{va2:#x} both translate to {pa:#x}",
                            b.subjects[s1].name, b.subjects[s2].name
                        ),
                        Locus { address: Some(pa), ..Locus::default() },
                    ));
                }
            }
        }
    }
    let mut cmaps: Vec<_> = by_cmap.into_iter().collect();
    cmaps.sort_unstable();
    for ((name, off), users) in cmaps {
        if users.windows(2).any(|w| w[0].2 != w[1].2) {
            r1.push(Finding::new(
                Condition::R1,
                "one channel location translates to different addresses",
                Locus { component: Some(name.to_string()), address: Some(off), ..Locus::default() },
            ));
        }
    }
    report.record(Condition::R1, r1, t);

    // R2
    let t = Instant::now();
    let mut r2 = Vec::new();
    for (s, pt) in pts.iter().enumerate().take(b.subjects.len()) {
        for va in (0..bound).step_by(PAGE_SIZE as usize) {
            if let (Some(pg), Ok(Some(tr))) = (pages[s].get(&va), pt.translate(va)) {
                if tr.perms != pg.perms {
                    r2.push(Finding::new(Condition::R2, PERMISSION_MISMATCH, at(s, va)));
                }
            }
        }
    }
    report.record(Condition::R2, r2, t);

    // R3
    let t = Instant::now();
    let mut r3 = Vec::new();
    for (s, pt) in pts.iter().enumerate().take(b.subjects.len()) {
        for va in (0..bound).step_by(PAGE_SIZE as usize) {
            if !pages[s].contains_key(&va) && !matches!(pt.translate(va), Ok(None)) {
                r3.push(Finding::new(Condition::R3, "invalid address is mapped", at(s, va)));
            }
        }
    }
    report.record(Condition::R3, r3, t);

    // R4
    let t = Instant::now();
    let mut r4 = Vec::new();
    let mut expected: HashMap<&str, Option<Vec<u8>>> = HashMap::new();
    for (s, valid) in pages.iter().enumerate() {
        for va in (0..bound).step_by(PAGE_SIZE as usize) {
            let Some(pg) = valid.get(&va) else { continue };
            let want = expected
                .entry(pg.phys.name.as_str())
                .or_insert_with(|| resolver.load(&pg.phys.content, pg.phys.size).ok());
            let want = want.as_ref().map(|w| &w[pg.offset as usize..(pg.offset + PAGE_SIZE) as usize]);
            let got = image.get(pg.pa as usize..(pg.pa + PAGE_SIZE) as usize);
            if want.is_none() || got != want {
                r4.push(Finding::new(Condition::R4, "page content differs from its source", at(s, va)));
            }
        }
    }
    // components no subject maps (paging structures) have no VA to probe
    let mapped: HashSet<&str> = b.subjects.iter().flat_map(|s| &s.virt).map(|v| v.physical.as_str()).collect();
    for c in b.physical.iter().filter(|c| !mapped.contains(c.name.as_str())) {
        let want = resolver.load(&c.content, c.size).ok();
        let differs = (0..c.size).any(|i| {
            let got = image.get((c.address + i) as usize);
            got.is_none() || want.as_ref().map(|w| w[i as usize]) != got.copied()
        });
        if differs {
            let locus = Locus { component: Some(c.name.clone()), ..Locus::default() };
            r4.push(Finding::new(Condition::R4, "unmapped component differs from its source", locus));
        }
    }
    report.record(Condition::R4, r4, t);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpolicy::{BSubject, PhysComponent, VirtComponent};
    use crate::content::ContentSource;
    use crate::paging::{Permissions, PtEntry};
    use crate::policy::parse_policy;
    use crate::toolchain::{generate, Artifacts, GenOptions};
    use proptest::prelude::*;

    const FIG4A: &str = include_str!("../fixtures/fig4a.xml");

    /// The fixture with channel attachments moved below 2^22 so the naive
    /// checker can cover every valid page.
    fn fig4a(opts: &GenOptions) -> Artifacts {
        let text = FIG4A.replace("0x70000000", "0x300000").replace("0x50000000", "0x310000");
        let p = parse_policy(&text).unwrap();
        generate(&p, ContentResolver::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures")), opts).unwrap()
    }

    fn inputs(a: &Artifacts) -> CheckInputs<'_> {
        CheckInputs {
            policy: &a.policy,
            bpolicy: &a.bpolicy,
            pts: &a.pts,
            image: &a.image,
            params: &a.params.concrete,
            resolver: &a.resolver,
        }
    }

    fn phys(name: &str, address: u64, size: u64) -> PhysComponent {
        PhysComponent { name: name.into(), address, size, content: ContentSource::Fill(0) }
    }

    /// Reference: two ranges overlap iff some byte lies in both.
    fn bytes_intersect(a: (u64, u64), b: (u64, u64)) -> bool {
        let sa: HashSet<u64> = (a.0..a.1).collect();
        (b.0..b.1).any(|x| sa.contains(&x))
    }

    #[test]
    fn phys_overlap_examples() {
        let adjacent =
            BPolicy { physical: vec![phys("A", 0x1000, 0x2000), phys("B", 0x3000, 0x1000)], subjects: vec![] };
        assert!(check_phys_overlap(&adjacent).is_empty());
        assert!(!bytes_intersect((0x1000, 0x3000), (0x3000, 0x4000)));

        let inner = BPolicy { physical: vec![phys("A", 0x1000, 0x2000), phys("B", 0x2800, 0x1000)], subjects: vec![] };
        let f = check_phys_overlap(&inner);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].message, "Illegal sharing detected.");

        let single = BPolicy { physical: vec![phys("A", 0x1000, 0x2000)], subjects: vec![] };
        assert!(check_phys_overlap(&single).is_empty());
    }

    proptest! {
        #[test]
        fn sweep_matches_byte_sets(iv in proptest::collection::vec((0u64..64, 0u64..16), 0..12)) {
            let iv: Vec<(u64, u64)> = iv.into_iter().map(|(s, l)| (s, s + l)).collect();
            let got = overlapping_pairs(&iv);
            let mut want = Vec::new();
            for i in 0..iv.len() {
                for j in i + 1..iv.len() {
                    if bytes_intersect(iv[i], iv[j]) {
                        want.push((i, j));
                    }
                }
            }
            prop_assert_eq!(got, want);
        }
    }

    fn two_subjects(v0: VirtComponent, v1: VirtComponent) -> BPolicy {
        BPolicy {
            physical: vec![phys("chan0", 0x20000, 0x1000)],
            subjects: vec![
                BSubject { name: "Sub0".into(), pt_base: 0x100000, virt: vec![v0] },
                BSubject { name: "Sub1".into(), pt_base: 0x200000, virt: vec![v1] },
            ],
        }
    }

    fn virt(va: u64, perms: Permissions, channel: bool) -> VirtComponent {
        VirtComponent { logical: "chan0".into(), va, size: 0x1000, perms, physical: "chan0".into(), channel }
    }

    #[test]
    fn virt_overlap_examples() {
        let ok = two_subjects(virt(0x7000_0000, Permissions::RW, true), virt(0x5000_0000, Permissions::RO, true));
        assert!(check_virt_overlap(&ok).is_empty());
        let undeclared =
            two_subjects(virt(0x7000_0000, Permissions::RW, true), virt(0x5000_0000, Permissions::RO, false));
        assert_eq!(check_virt_overlap(&undeclared)[0].message, ILLEGAL_SHARING);
        let read_only =
            two_subjects(virt(0x7000_0000, Permissions::RO, false), virt(0x5000_0000, Permissions::RO, false));
        assert!(check_virt_overlap(&read_only).is_empty());
    }

    #[test]
    fn clean_artifacts_pass_everything() {
        let a = fig4a(&GenOptions::default());
        let r = check_all(inputs(&a));
        assert!(r.passed(), "{:?}", r.findings().collect::<Vec<_>>());
        let n = naive_check(&a.bpolicy, &a.pts, &a.image, &a.resolver, 1 << 22).unwrap();
        assert!(n.passed());
        assert_eq!(n.conditions.len(), 4);
    }

    #[test]
    fn redirected_leaf_gives_one_address_mismatch() {
        let a = fig4a(&GenOptions::default());
        let mut pts = a.pts.clone();
        let pg = a.bpolicy.pages(0)[1];
        let leaf = pts[0].walk(pg.va).unwrap().entries[3];
        pts[0].entries[leaf] += 0x1000;
        let f = check_pt_match(&a.bpolicy, &pts);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].message, ADDRESS_MISMATCH);
        assert_eq!(f[0].locus.address, Some(pg.va));
        assert!(check_permissions(&a.bpolicy, &pts).is_empty());
        // reference: per-page translation
        let naive: Vec<u64> = a
            .bpolicy
            .pages(0)
            .iter()
            .filter(|p| pts[0].translate(p.va).unwrap().unwrap().pa != p.pa)
            .map(|p| p.va)
            .collect();
        assert_eq!(naive, vec![pg.va]);

        let mut pts = a.pts.clone();
        pts[0].entries[leaf] = 0;
        let f = check_pt_match(&a.bpolicy, &pts);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].locus.address, Some(pg.va));
    }

    #[test]
    fn permission_bit_faults() {
        let a = fig4a(&GenOptions::default());
        let data = a.bpolicy.pages(0).into_iter().find(|p| p.perms == Permissions::RW).unwrap();
        let mut pts = a.pts.clone();
        let leaf = pts[0].walk(data.va).unwrap().entries[3];
        pts[0].entries[leaf] &= !crate::paging::WRITABLE;
        assert_eq!(check_permissions(&a.bpolicy, &pts).len(), 1);
        let mut pts = a.pts.clone();
        pts[0].entries[leaf] &= !crate::paging::NO_EXECUTE;
        let f = check_permissions(&a.bpolicy, &pts);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].message, PERMISSION_MISMATCH);
    }

    /// Reference for validity: entries reachable from valid pages by an
    /// independent walk over raw words.
    fn naive_invalid_entries(b: &BPolicy, s: usize, pt: &PagingStructureFile) -> Vec<usize> {
        let mut used = HashSet::new();
        for pg in b.pages(s) {
            let mut table = 0usize;
            for sh in [39u32, 30, 21, 12] {
                let idx = table + ((pg.va >> sh) & 511) as usize;
                used.insert(idx);
                let e = pt.entries[idx];
                if e & 1 == 0 || sh == 12 {
                    break;
                }
                table = (((e & crate::paging::ADDR_MASK) - pt.pt_base) / 8) as usize;
            }
        }
        (0..pt.entries.len()).filter(|i| pt.entries[*i] & 1 == 1 && !used.contains(i)).collect()
    }

    #[test]
    fn spurious_entries() {
        let a = fig4a(&GenOptions::default());
        assert!(check_validity(&a.bpolicy, &a.pts).is_empty());
        let mut pts = a.pts.clone();
        let leaf = pts[1].walk(a.bpolicy.pages(1)[0].va).unwrap().entries[3];
        let spare = leaf + 100;
        pts[1].entries[spare] = PtEntry::encode(0x5000, true, false, true).unwrap().0;
        let f = check_validity(&a.bpolicy, &pts);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].locus.entry, Some(spare));
        assert_eq!(naive_invalid_entries(&a.bpolicy, 1, &pts[1]), vec![spare]);

        // a spurious PDPT entry pointing at the PML4
        let mut pts = a.pts.clone();
        let pdpt_entry = pts[1].walk(a.bpolicy.pages(1)[0].va).unwrap().entries[1] + 7;
        pts[1].entries[pdpt_entry] = PtEntry::encode(pts[1].pt_base, true, true, false).unwrap().0;
        let f = check_validity(&a.bpolicy, &pts);
        assert_eq!(f.iter().map(|f| f.locus.entry.unwrap()).collect::<Vec<_>>(), vec![pdpt_entry]);
        assert_eq!(naive_invalid_entries(&a.bpolicy, 1, &pts[1]), vec![pdpt_entry]);
    }

    #[test]
    fn content_faults() {
        let a = fig4a(&GenOptions::default());
        assert!(check_content(&a.bpolicy, &a.image, &a.resolver).is_empty());
        let mut image = a.image.clone();
        let c = a.bpolicy.phys("sub2.data").unwrap();
        image[(c.address + 77) as usize] ^= 1;
        let f = check_content(&a.bpolicy, &image, &a.resolver);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].locus.address, Some(c.address + 77));
    }

    #[test]
    fn structure_faults() {
        let a = fig4a(&GenOptions::default());
        assert!(check_structures(&a.policy, &a.params.concrete).is_empty());
        let mut params = a.params.concrete.clone();
        params.sched.sched_plans[0][0][0].deadline += 1;
        let f = check_structures(&a.policy, &params);
        assert_eq!(f.len(), 1);
        assert!(f[0].message.starts_with("sched_plans"));
        let mut params = a.params.concrete.clone();
        params.vector_routing[0].subject = 3;
        let f = check_structures(&a.policy, &params);
        assert_eq!(f.len(), 1);
        assert!(f[0].message.starts_with("vector_routing"));
    }

    #[test]
    fn naive_channel_and_aliasing() {
        // both channel attachments share one physical page: allowed
        let a = fig4a(&GenOptions::default());
        let n = naive_check(&a.bpolicy, &a.pts, &a.image, &a.resolver, 1 << 22).unwrap();
        assert_eq!(n.pass(Condition::R1), Some(true));

        // a private page of sub2 redirected onto sub1's data: not allowed
        let mut pts = a.pts.clone();
        let target = a.bpolicy.phys("sub1.data").unwrap().address;
        let pg = a.bpolicy.pages(1).into_iter().find(|p| p.perms.w).unwrap();
        let leaf = pts[1].walk(pg.va).unwrap().entries[3];
        pts[1].entries[leaf] = (pts[1].entries[leaf] & !crate::paging::ADDR_MASK) | target;
        let n = naive_check(&a.bpolicy, &pts, &a.image, &a.resolver, 1 << 22).unwrap();
        assert_eq!(n.failed_conditions(), vec![Condition::R1]);
        assert_eq!(
            naive_check(&a.bpolicy, &pts, &a.image, &a.resolver, 1 << 26),
            Err(NaiveError::BoundTooLarge(1 << 26))
        );
    }

    #[test]
    fn every_fault_hits_its_condition_on_fig4a() {
        for f in crate::faults::Fault::ALL {
            if f == crate::faults::Fault::PhysOverlap {
                continue; // one channel only
            }
            let a = fig4a(&GenOptions { fault: Some(f), fault_seed: 3, ..GenOptions::default() });
            let r = check_all(inputs(&a));
            assert_eq!(r.failed_conditions(), vec![f.condition()], "{f}");
            if f != crate::faults::Fault::SchedDeadline {
                let n = naive_check(&a.bpolicy, &a.pts, &a.image, &a.resolver, 1 << 22).unwrap();
                assert_eq!(n.failed_conditions(), vec![f.condition()], "{f} naive");
            }
        }
    }

    #[test]
    fn naive_rejects_pages_beyond_bound() {
        let p = parse_policy(FIG4A).unwrap();
        let a = generate(
            &p,
            ContentResolver::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures")),
            &GenOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            naive_check(&a.bpolicy, &a.pts, &a.image, &a.resolver, 1 << 22),
            Err(NaiveError::PageBeyondBound { va: 0x7000_0000, .. })
        ));
        assert!(check_all(inputs(&a)).passed());
    }

    #[test]
    fn flipped_page_table_byte_in_image_fails_r4_both_ways() {
        let mut a = fig4a(&GenOptions::default());
        let pt = a.bpolicy.phys("sub2.pt").unwrap().address as usize;
        a.image[pt + 9] ^= 0x10;
        assert_eq!(check_all(inputs(&a)).failed_conditions(), vec![Condition::R4]);
        let n = naive_check(&a.bpolicy, &a.pts, &a.image, &a.resolver, 1 << 22).unwrap();
        assert_eq!(n.failed_conditions(), vec![Condition::R4]);
    }

    #[test]
    fn findings_are_deterministic() {
        let a = fig4a(&GenOptions { fault: Some(crate::faults::Fault::DropChannelFlag), ..GenOptions::default() });
        let f1: Vec<_> = check_all(inputs(&a)).findings().cloned().collect();
        let f2: Vec<_> = check_all(inputs(&a)).findings().cloned().collect();
        assert_eq!(f1, f2);
    }
}
