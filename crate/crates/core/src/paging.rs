//! Four-level x86-64 paging with 4 KiB leaves and the page-table file format.
//!
//! A page-table file is the concatenation of 4096-byte paging structures,
//! PML4 first, then all PDPTs, PDs and PTs. Entries hold physical addresses,
//! so a structure pointed to by an entry lives at file offset
//! `target - pt_base`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;
pub const ENTRIES_PER_TABLE: usize = 512;
pub const VA_LIMIT: u64 = 1 << 48;
pub const PA_LIMIT: u64 = 1 << 52;

pub const PRESENT: u64 = 1;
pub const WRITABLE: u64 = 1 << 1;
pub const NO_EXECUTE: u64 = 1 << 63;
pub const ADDR_MASK: u64 = 0x000f_ffff_ffff_f000;

pub fn page_align_down(a: u64) -> u64 {
    a & !(PAGE_SIZE - 1)
}

pub fn is_page_aligned(a: u64) -> bool {
    a.is_multiple_of(PAGE_SIZE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("virtual address {0:#x} is not below 2^48")]
pub struct NonCanonical(pub u64);

/// Table indices from PML4 down to PT, and the page offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaSplit {
    pub pml4: usize,
    pub pdpt: usize,
    pub pd: usize,
    pub pt: usize,
    pub offset: u64,
}

impl VaSplit {
    pub fn indices(&self) -> [usize; 4] {
        [self.pml4, self.pdpt, self.pd, self.pt]
    }
}

pub fn split_va(va: u64) -> Result<VaSplit, NonCanonical> {
    if va >= VA_LIMIT {
        return Err(NonCanonical(va));
    }
    Ok(VaSplit {
        pml4: ((va >> 39) & 0x1ff) as usize,
        pdpt: ((va >> 30) & 0x1ff) as usize,
        pd: ((va >> 21) & 0x1ff) as usize,
        pt: ((va >> 12) & 0x1ff) as usize,
        offset: va & 0xfff,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Permissions {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Permissions {
    pub const RO: Permissions = Permissions { r: true, w: false, x: false };
    pub const RW: Permissions = Permissions { r: true, w: true, x: false };
    pub const RX: Permissions = Permissions { r: true, w: false, x: true };
    pub const RWX: Permissions = Permissions { r: true, w: true, x: true };
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid permission string {0:?}: expected three characters like rw- or r-x, readable")]
pub struct BadPermissions(pub String);

impl FromStr for Permissions {
    type Err = BadPermissions;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        let bad = || BadPermissions(s.into());
        if b.len() != 3 {
            return Err(bad());
        }
        let flag = |c: u8, set: u8| match c {
            c if c == set => Ok(true),
            b'-' => Ok(false),
            _ => Err(bad()),
        };
        let p = Permissions { r: flag(b[0], b'r')?, w: flag(b[1], b'w')?, x: flag(b[2], b'x')? };
        if !p.r {
            return Err(bad());
        }
        Ok(p)
    }
}

impl TryFrom<String> for Permissions {
    type Error = BadPermissions;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Permissions> for String {
    fn from(p: Permissions) -> String {
        p.to_string()
    }
}

impl fmt::Display for Permissions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |on: bool, ch: char| if on { ch } else { '-' };
        write!(f, "{}{}{}", c(self.r, 'r'), c(self.w, 'w'), c(self.x, 'x'))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("physical address {0:#x} is not 4 KiB aligned or exceeds 52 bits")]
pub struct MisalignedAddress(pub u64);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PtEntry(pub u64);

impl PtEntry {
    /// Generated tables store not-present entries as all-zero words.
    pub fn encode(pa: u64, present: bool, writable: bool, no_execute: bool) -> Result<Self, MisalignedAddress> {
        if !is_page_aligned(pa) || pa >= PA_LIMIT {
            return Err(MisalignedAddress(pa));
        }
        if !present {
            return Ok(PtEntry(0));
        }
        let mut raw = pa | PRESENT;
        if writable {
            raw |= WRITABLE;
        }
        if no_execute {
            raw |= NO_EXECUTE;
        }
        Ok(PtEntry(raw))
    }

    pub fn present(self) -> bool {
        self.0 & PRESENT != 0
    }

    pub fn writable(self) -> bool {
        self.0 & WRITABLE != 0
    }

    pub fn no_execute(self) -> bool {
        self.0 & NO_EXECUTE != 0
    }

    pub fn addr(self) -> u64 {
        self.0 & ADDR_MASK
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PtFileError {
    #[error("page-table file length {0} is not a positive multiple of 4096")]
    BadLength(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum PagingError {
    #[error(transparent)]
    NonCanonical(#[from] NonCanonical),
    #[error("entry {entry} points to {target:#x}, outside the page-table file")]
    Corrupt { entry: usize, target: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Translation {
    pub pa: u64,
    pub perms: Permissions,
}

/// Entry indices (into the whole file) visited by a walk, PML4 first. The
/// walk stops at the first not-present entry, which is still recorded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Walk {
    pub entries: [usize; 4],
    pub len: usize,
    pub translation: Option<Translation>,
}

impl Walk {
    pub fn visited(&self) -> &[usize] {
        &self.entries[..self.len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PagingStructureFile {
    pub pt_base: u64,
    pub entries: Vec<u64>,
}

impl PagingStructureFile {
    pub fn empty(pt_base: u64) -> Self {
        Self { pt_base, entries: vec![0; ENTRIES_PER_TABLE] }
    }

    pub fn read(pt_base: u64, bytes: &[u8]) -> Result<Self, PtFileError> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(PAGE_SIZE as usize) {
            return Err(PtFileError::BadLength(bytes.len()));
        }
        let entries = bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { pt_base, entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|e| e.to_le_bytes()).collect()
    }

    pub fn len_bytes(&self) -> u64 {
        self.entries.len() as u64 * 8
    }

    pub fn structures(&self) -> usize {
        self.entries.len() / ENTRIES_PER_TABLE
    }

    pub fn entry(&self, index: usize) -> PtEntry {
        PtEntry(self.entries[index])
    }

    /// First entry index of the structure an entry points to.
    fn structure_at(&self, entry: usize, target: u64) -> Result<usize, PagingError> {
        let end = self.pt_base + self.len_bytes();
        if target < self.pt_base || target >= end || !is_page_aligned(target - self.pt_base) {
            return Err(PagingError::Corrupt { entry, target });
        }
        Ok(((target - self.pt_base) / 8) as usize)
    }

    pub fn walk(&self, va: u64) -> Result<Walk, PagingError> {
        let (walk, err) = self.walk_partial(va)?;
        match err {
            Some(e) => Err(e),
            None => Ok(walk),
        }
    }

    /// Like [`walk`](Self::walk) but keeps the entries visited before a
    /// corrupt pointer was hit.
    pub fn walk_partial(&self, va: u64) -> Result<(Walk, Option<PagingError>), NonCanonical> {
        let split = split_va(va)?;
        let mut walk = Walk::default();
        let mut table = 0usize;
        let mut writable = true;
        let mut no_exec = false;
        for (level, idx) in split.indices().into_iter().enumerate() {
            let index = table + idx;
            walk.entries[level] = index;
            walk.len = level + 1;
            let e = self.entry(index);
            if !e.present() {
                return Ok((walk, None));
            }
            writable &= e.writable();
            no_exec |= e.no_execute();
            if level == 3 {
                walk.translation = Some(Translation {
                    pa: e.addr() + split.offset,
                    perms: Permissions { r: true, w: writable, x: !no_exec },
                });
            } else {
                match self.structure_at(index, e.addr()) {
                    Ok(t) => table = t,
                    Err(err) => return Ok((walk, Some(err))),
                }
            }
        }
        Ok((walk, None))
    }

    pub fn translate(&self, va: u64) -> Result<Option<Translation>, PagingError> {
        Ok(self.walk(va)?.translation)
    }
}

/// A page to map: virtual page, physical page, permissions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageMapping {
    pub va: u64,
    pub pa: u64,
    pub perms: Permissions,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GenError {
    #[error(transparent)]
    NonCanonical(#[from] NonCanonical),
    #[error(transparent)]
    Misaligned(#[from] MisalignedAddress),
    #[error("virtual page {0:#x} mapped twice")]
    DuplicatePage(u64),
}

/// Virtual-range keys of the PDPTs, PDs and PTs needed to map `vas`, each in
/// ascending order.
fn structure_keys(vas: impl Iterator<Item = u64>) -> [Vec<u64>; 3] {
    let mut pdpt = BTreeSet::new();
    let mut pd = BTreeSet::new();
    let mut pt = BTreeSet::new();
    for va in vas {
        pdpt.insert(va >> 39);
        pd.insert(va >> 30);
        pt.insert(va >> 21);
    }
    [pdpt.into_iter().collect(), pd.into_iter().collect(), pt.into_iter().collect()]
}

/// Number of 4 KiB structures required to map the given virtual pages.
pub fn structure_count(vas: impl Iterator<Item = u64>) -> usize {
    let [a, b, c] = structure_keys(vas);
    1 + a.len() + b.len() + c.len()
}

/// Builds the page tables for a set of 4 KiB mappings. Non-leaf entries are
/// present and writable with execution allowed, so leaf bits alone decide
/// the effective permissions. Every entry not on a walk stays zero.
pub fn build_page_tables(pt_base: u64, mappings: &[PageMapping]) -> Result<PagingStructureFile, GenError> {
    for m in mappings {
        split_va(m.va)?;
        if !is_page_aligned(m.va) {
            return Err(GenError::Misaligned(MisalignedAddress(m.va)));
        }
    }
    let [pdpts, pds, pts] = structure_keys(mappings.iter().map(|m| m.va));
    let first_pdpt = 1;
    let first_pd = first_pdpt + pdpts.len();
    let first_pt = first_pd + pds.len();
    let total = first_pt + pts.len();
    let mut entries = vec![0u64; total * ENTRIES_PER_TABLE];

    let struct_pa = |n: usize| pt_base + n as u64 * PAGE_SIZE;
    let pos = |keys: &[u64], key: u64| keys.binary_search(&key).expect("key collected above");
    let link = |pa: u64| -> Result<u64, GenError> { Ok(PtEntry::encode(pa, true, true, false)?.0) };

    for m in mappings {
        let s = split_va(m.va)?;
        let pdpt_n = first_pdpt + pos(&pdpts, m.va >> 39);
        let pd_n = first_pd + pos(&pds, m.va >> 30);
        let pt_n = first_pt + pos(&pts, m.va >> 21);
        entries[s.pml4] = link(struct_pa(pdpt_n))?;
        entries[pdpt_n * ENTRIES_PER_TABLE + s.pdpt] = link(struct_pa(pd_n))?;
        entries[pd_n * ENTRIES_PER_TABLE + s.pd] = link(struct_pa(pt_n))?;
        let leaf = &mut entries[pt_n * ENTRIES_PER_TABLE + s.pt];
        if *leaf != 0 {
            return Err(GenError::DuplicatePage(m.va));
        }
        *leaf = PtEntry::encode(m.pa, true, m.perms.w, !m.perms.x)?.0;
    }
    Ok(PagingStructureFile { pt_base, entries })
}
