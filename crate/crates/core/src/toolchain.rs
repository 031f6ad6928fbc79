//! Artifact generation: physical layout, page tables, memory image and the
//! parameter bundles for both machines.

use crate::bpolicy::{self, BPolicy, BPolicyError, BSubject, PhysComponent, VirtComponent};
use crate::content::{ContentError, ContentResolver, ContentSource};
use crate::faults::{self, AppliedFault, Fault, FaultError};
use crate::paging::{self, GenError, PageMapping, PagingStructureFile, Permissions, PtFileError, PAGE_SIZE};
use crate::policy::{self, Diagnostic, Policy, PolicyError, VectorRoutingEntry};
use crate::sched::{derive_sched, SchedDerived};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FIRST_PHYS_ADDR: u64 = 0x1000;
pub const DEFAULT_IMAGE_CAP: u64 = 64 << 20;
pub const IMAGE_FILE: &str = "image.bin";
pub const PARAMS_FILE: &str = "params.json";
pub const POLICY_FILE: &str = "policy.xml";
pub const BPOLICY_FILE: &str = "bpolicy.xml";
pub const PT_DIR: &str = "pts";

pub fn pt_file_name(subject: &str) -> String {
    format!("{PT_DIR}/{subject}.pt")
}

pub fn channel_phys_name(channel: &str) -> String {
    format!("chan.{channel}")
}

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("policy is invalid:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    InvalidPolicy(Vec<Diagnostic>),
    #[error("physical memory needs {needed:#x} bytes, more than the cap of {cap:#x}")]
    CapExceeded { needed: u64, cap: u64 },
    #[error("two physical components would be named {0:?}")]
    DuplicatePhysicalName(String),
    #[error(transparent)]
    PageTables(#[from] GenError),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

/// Assigns physical addresses: subject memory in (subject, declaration)
/// order, then channels, then each subject's paging structures, packed from
/// [`FIRST_PHYS_ADDR`].
pub fn layout(p: &Policy, cap: u64) -> Result<BPolicy, ToolchainError> {
    let mut physical = Vec::new();
    let mut names = HashSet::new();
    let mut addr = FIRST_PHYS_ADDR;
    let mut push = |name: String, size: u64, content: ContentSource, addr: &mut u64| -> Result<u64, ToolchainError> {
        if !names.insert(name.clone()) {
            return Err(ToolchainError::DuplicatePhysicalName(name));
        }
        let at = *addr;
        *addr = addr
            .checked_add(size)
            .filter(|&e| e <= cap)
            .ok_or(ToolchainError::CapExceeded { needed: addr.saturating_add(size), cap })?;
        physical.push(PhysComponent { name, address: at, size, content });
        Ok(at)
    };

    for s in &p.subjects {
        for m in &s.memory {
            push(format!("{}.{}", s.name, m.logical), m.size, m.content.clone(), &mut addr)?;
        }
    }
    for c in &p.channels {
        push(channel_phys_name(&c.name), c.size, ContentSource::Fill(0), &mut addr)?;
    }
    let mut subjects = Vec::new();
    for s in &p.subjects {
        let pages = p.regions(s).flat_map(|r| (r.va..r.va + r.size).step_by(PAGE_SIZE as usize));
        let size = paging::structure_count(pages) as u64 * PAGE_SIZE;
        let pt_base = push(format!("{}.pt", s.name), size, ContentSource::File(pt_file_name(&s.name)), &mut addr)?;
        let virt = p
            .regions(s)
            .map(|r| VirtComponent {
                logical: r.logical.to_string(),
                va: r.va,
                size: r.size,
                perms: r.perms,
                physical: match r.channel {
                    Some(c) => channel_phys_name(&p.channels[c].name),
                    None => format!("{}.{}", s.name, r.logical),
                },
                channel: r.channel.is_some(),
            })
            .collect();
        subjects.push(BSubject { name: s.name.clone(), pt_base, virt });
    }
    Ok(BPolicy { physical, subjects })
}

pub fn gen_page_tables(b: &BPolicy, s: usize) -> Result<PagingStructureFile, GenError> {
    let mappings: Vec<PageMapping> =
        b.pages(s).into_iter().map(|pg| PageMapping { va: pg.va, pa: pg.pa, perms: pg.perms }).collect();
    paging::build_page_tables(b.subjects[s].pt_base, &mappings)
}

/// Identity image: byte `a` of the image is physical address `a`. Later
/// components overwrite earlier ones where they overlap.
pub fn build_image(b: &BPolicy, resolver: &ContentResolver, cap: u64) -> Result<Vec<u8>, ToolchainError> {
    let end = b.physical.iter().map(PhysComponent::end).max().unwrap_or(0);
    let len = end.div_ceil(PAGE_SIZE) * PAGE_SIZE;
    if len > cap {
        return Err(ToolchainError::CapExceeded { needed: len, cap });
    }
    let mut image = vec![0u8; len as usize];
    for c in &b.physical {
        let bytes = resolver.load(&c.content, c.size)?;
        image[c.address as usize..c.end() as usize].copy_from_slice(&bytes);
    }
    Ok(image)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractRegion {
    pub logical: String,
    pub va: u64,
    pub size: u64,
    pub perms: Permissions,
    /// Initial contents of private regions; channels start zeroed.
    pub content: Option<ContentSource>,
    /// Offset of the channel in channel memory.
    pub chmem_offset: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractSubjectParams {
    pub name: String,
    pub cpu: usize,
    pub entry_ip: u64,
    pub entry_sp: u64,
    pub regions: Vec<AbstractRegion>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsAbstract {
    pub nsubs: usize,
    pub ncpus: usize,
    pub subjects: Vec<AbstractSubjectParams>,
    pub chmem_size: u64,
    pub sched: SchedDerived,
    pub routing: Vec<VectorRoutingEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub name: String,
    pub cpu: usize,
    pub pt_base: u64,
    pub pt_file: String,
    pub vmcs: usize,
    pub entry_ip: u64,
    pub entry_sp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsConcrete {
    pub nsubs: usize,
    pub ncpus: usize,
    pub subject_specs: Vec<SubjectSpec>,
    pub sched: SchedDerived,
    pub vector_routing: Vec<VectorRoutingEntry>,
    pub image: String,
    pub image_len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    #[serde(rename = "abstract")]
    pub abs: ParamsAbstract,
    pub concrete: ParamsConcrete,
}

/// The abstract bundle is derived from the policy alone; the concrete one
/// takes page-table locations from the B-policy.
pub fn gen_parameters(p: &Policy, b: &BPolicy, image_len: u64) -> Params {
    let sched = derive_sched(p);
    let mut offsets = Vec::with_capacity(p.channels.len());
    let mut chmem_size = 0;
    for c in &p.channels {
        offsets.push(chmem_size);
        chmem_size += c.size;
    }
    let subjects = p
        .subjects
        .iter()
        .map(|s| AbstractSubjectParams {
            name: s.name.clone(),
            cpu: s.cpu,
            entry_ip: s.entry_ip,
            entry_sp: s.entry_sp,
            regions: s
                .memory
                .iter()
                .map(|m| AbstractRegion {
                    logical: m.logical.clone(),
                    va: m.va,
                    size: m.size,
                    perms: m.perms,
                    content: Some(m.content.clone()),
                    chmem_offset: None,
                })
                .chain(p.regions(s).filter_map(|r| {
                    r.channel.map(|c| AbstractRegion {
                        logical: r.logical.to_string(),
                        va: r.va,
                        size: r.size,
                        perms: r.perms,
                        content: None,
                        chmem_offset: Some(offsets[c]),
                    })
                }))
                .collect(),
        })
        .collect();
    let abs = ParamsAbstract {
        nsubs: p.subjects.len(),
        ncpus: p.ncpus,
        subjects,
        chmem_size,
        sched: sched.clone(),
        routing: p.routing.clone(),
    };
    let subject_specs = p
        .subjects
        .iter()
        .map(|s| SubjectSpec {
            name: s.name.clone(),
            cpu: s.cpu,
            pt_base: b.subjects.iter().find(|bs| bs.name == s.name).map_or(0, |bs| bs.pt_base),
            pt_file: pt_file_name(&s.name),
            vmcs: s.id,
            entry_ip: s.entry_ip,
            entry_sp: s.entry_sp,
        })
        .collect();
    let concrete = ParamsConcrete {
        nsubs: p.subjects.len(),
        ncpus: p.ncpus,
        subject_specs,
        sched,
        vector_routing: p.routing.clone(),
        image: IMAGE_FILE.into(),
        image_len,
    };
    Params { abs, concrete }
}

#[derive(Clone, Debug, Default)]
pub struct GenOptions {
    pub cap: Option<u64>,
    pub fault: Option<Fault>,
    pub fault_seed: u64,
}

/// Everything the checker and the machines consume.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub policy: Policy,
    pub bpolicy: BPolicy,
    pub pts: Vec<PagingStructureFile>,
    pub image: Vec<u8>,
    pub params: Params,
    pub resolver: ContentResolver,
    pub fault: Option<AppliedFault>,
}

/// Runs the whole pipeline. A fault switch, if given, is applied at the
/// stage it belongs to so later stages stay consistent with it.
pub fn generate(p: &Policy, mut resolver: ContentResolver, opts: &GenOptions) -> Result<Artifacts, ToolchainError> {
    let diags = policy::validate_policy(p);
    if !diags.is_empty() {
        return Err(ToolchainError::InvalidPolicy(diags));
    }
    let cap = opts.cap.unwrap_or(DEFAULT_IMAGE_CAP);
    let mut rng = faults::fault_rng(opts.fault_seed);
    let mut applied = None;

    let mut b = layout(p, cap)?;
    if let Some(f) = opts.fault.filter(|f| f.stage() == faults::Stage::BPolicy) {
        applied = Some(faults::apply_bpolicy(f, p, &mut b, &mut rng)?);
    }
    let mut pts = (0..b.subjects.len()).map(|s| gen_page_tables(&b, s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(f) = opts.fault.filter(|f| f.stage() == faults::Stage::PageTables) {
        applied = Some(faults::apply_page_tables(f, &b, &mut pts, &mut rng)?);
    }
    for (s, pt) in b.subjects.iter().zip(&pts) {
        resolver.insert(pt_file_name(&s.name), pt.to_bytes());
    }
    let mut image = build_image(&b, &resolver, cap)?;
    if let Some(f) = opts.fault.filter(|f| f.stage() == faults::Stage::Image) {
        applied = Some(faults::apply_image(f, &b, &mut image, &mut rng)?);
    }
    let mut params = gen_parameters(p, &b, image.len() as u64);
    if let Some(f) = opts.fault.filter(|f| f.stage() == faults::Stage::Params) {
        applied = Some(faults::apply_params(f, &mut params.concrete, &mut rng)?);
    }
    Ok(Artifacts { policy: p.clone(), bpolicy: b, pts, image, params, resolver, fault: applied })
}

#[derive(Debug, Error)]
pub enum ArtifactIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Policy {
        path: PathBuf,
        #[source]
        source: PolicyError,
    },
    #[error("{path}: {source}")]
    BPolicy {
        path: PathBuf,
        #[source]
        source: BPolicyError,
    },
    #[error("{path}: {source}")]
    PageTable {
        path: PathBuf,
        #[source]
        source: PtFileError,
    },
    #[error("{path}: {source}")]
    Params {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("B-policy has no subject {0:?} for page table lookup")]
    MissingSubject(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactIoError + '_ {
    move |source| ArtifactIoError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ArtifactIoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>, ArtifactIoError> {
    std::fs::read(path).map_err(io_err(path))
}

impl Artifacts {
    /// Writes `policy.xml`, `bpolicy.xml`, `pts/*.pt`, `image.bin`,
    /// `params.json`, and any in-memory content files, below `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ArtifactIoError> {
        write_file(&dir.join(POLICY_FILE), policy::serialize_policy(&self.policy).as_bytes())?;
        write_file(&dir.join(BPOLICY_FILE), bpolicy::serialize_bpolicy(&self.bpolicy).as_bytes())?;
        for (s, pt) in self.bpolicy.subjects.iter().zip(&self.pts) {
            write_file(&dir.join(pt_file_name(&s.name)), &pt.to_bytes())?;
        }
        for (path, bytes) in self.resolver.overrides() {
            if !path.starts_with(PT_DIR) && Path::new(path).is_relative() {
                write_file(&dir.join(path), bytes)?;
            }
        }
        write_file(&dir.join(IMAGE_FILE), &self.image)?;
        let json = serde_json::to_vec_pretty(&self.params)
            .map_err(|source| ArtifactIoError::Params { path: dir.join(PARAMS_FILE), source })?;
        write_file(&dir.join(PARAMS_FILE), &json)
    }

    /// Loads a directory written by [`Artifacts::write`].
    pub fn load(dir: &Path) -> Result<Self, ArtifactIoError> {
        let policy = load_policy(&dir.join(POLICY_FILE))?;
        let bpolicy = load_bpolicy(&dir.join(BPOLICY_FILE))?;
        let pts = load_pts(&dir.join(PT_DIR), &bpolicy)?;
        let image = read_file(&dir.join(IMAGE_FILE))?;
        let params = load_params(&dir.join(PARAMS_FILE))?;
        Ok(Self { policy, bpolicy, pts, image, params, resolver: ContentResolver::new(dir), fault: None })
    }
}

pub fn load_policy(path: &Path) -> Result<Policy, ArtifactIoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    policy::parse_policy(&text).map_err(|source| ArtifactIoError::Policy { path: path.into(), source })
}

pub fn load_bpolicy(path: &Path) -> Result<BPolicy, ArtifactIoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    bpolicy::parse_bpolicy(&text).map_err(|source| ArtifactIoError::BPolicy { path: path.into(), source })
}

/// Reads `<dir>/<subject>.pt` for every B-policy subject.
pub fn load_pts(dir: &Path, b: &BPolicy) -> Result<Vec<PagingStructureFile>, ArtifactIoError> {
    b.subjects
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.pt", s.name));
            let bytes = read_file(&path)?;
            PagingStructureFile::read(s.pt_base, &bytes).map_err(|source| ArtifactIoError::PageTable { path, source })
        })
        .collect()
}

pub fn load_params(path: &Path) -> Result<Params, ArtifactIoError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| ArtifactIoError::Params { path: path.into(), source })
}

pub fn load_image(path: &Path) -> Result<Vec<u8>, ArtifactIoError> {
    read_file(path)
}
