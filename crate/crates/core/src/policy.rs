//! The XML system policy: subjects, memory, channels, schedule, routing.

use crate::content::ContentSource;
use crate::paging::{is_page_aligned, Permissions, VA_LIMIT};
use crate::xml::{self, attr, hex_u64, opt_attr, parse_bool, parse_u64, Located, XmlError};
use roxmltree::Node;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use thiserror::Error;

pub const MAX_TICKS: u64 = 1 << 32;
pub const NUM_VECTORS: usize = 256;
pub const NUM_EVENT_VECTORS: u8 = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub tick_rate: u64,
    pub ncpus: usize,
    pub subjects: Vec<Subject>,
    pub channels: Vec<ChannelSpec>,
    pub schedule: Vec<MajorFrameSpec>,
    pub routing: Vec<VectorRoutingEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub id: usize,
    pub cpu: usize,
    pub entry_ip: u64,
    pub entry_sp: u64,
    pub memory: Vec<MemorySpec>,
    pub channel_refs: Vec<ChannelRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub logical: String,
    pub va: u64,
    pub size: u64,
    pub perms: Permissions,
    pub content: ContentSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRef {
    pub channel: String,
    pub va: u64,
    pub writable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorFrameSpec {
    pub cpus: Vec<CpuFrameSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuFrameSpec {
    pub cpu: usize,
    pub minor_frames: Vec<MinorFrameSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinorFrameSpec {
    /// Dense 0-based subject id.
    pub subject: usize,
    pub ticks: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VectorRoutingEntry {
    pub vector: u8,
    pub subject: usize,
    pub dest_vector: u8,
}

/// One entry of a subject's virtual address space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirtRegion<'a> {
    pub logical: &'a str,
    pub va: u64,
    pub size: u64,
    pub perms: Permissions,
    /// Index into `Policy::channels` for channel attachments.
    pub channel: Option<usize>,
}

impl Policy {
    pub fn subject_by_name(&self, name: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.name == name)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Memory components followed by channel attachments, in declaration order.
    pub fn regions<'a>(&'a self, subject: &'a Subject) -> impl Iterator<Item = VirtRegion<'a>> + 'a {
        let mem = subject.memory.iter().map(|m| VirtRegion {
            logical: &m.logical,
            va: m.va,
            size: m.size,
            perms: m.perms,
            channel: None,
        });
        let chans = subject.channel_refs.iter().map(move |c| {
            let idx = self.channel_index(&c.channel);
            VirtRegion {
                logical: &c.channel,
                va: c.va,
                size: idx.map_or(0, |i| self.channels[i].size),
                perms: Permissions { r: true, w: c.writable, x: false },
                channel: idx,
            }
        });
        mem.chain(chans)
    }

    /// `(subject, attachment)` pairs for a channel.
    pub fn attachments(&self, channel: &str) -> Vec<(usize, &ChannelRef)> {
        self.subjects
            .iter()
            .flat_map(|s| s.channel_refs.iter().filter(|c| c.channel == channel).map(move |c| (s.id, c)))
            .collect()
    }

    /// Rewrites relative `file:` content paths against `base`.
    pub fn absolutize_content(&mut self, base: &std::path::Path) {
        for s in &mut self.subjects {
            for m in &mut s.memory {
                if let ContentSource::File(p) = &m.content {
                    if std::path::Path::new(p).is_relative() {
                        m.content = ContentSource::File(base.join(p).to_string_lossy().into_owned());
                    }
                }
            }
        }
    }
}

// --- Parsing --------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("line {line}: duplicate subject name {name:?}")]
    DuplicateSubject { line: u32, name: String },
    #[error("line {line}: duplicate channel name {name:?}")]
    DuplicateChannel { line: u32, name: String },
    #[error("line {line}: reference to unknown subject {reference}")]
    UnknownSubject { line: u32, reference: String },
    #[error("line {line}: reference to unknown channel {name:?}")]
    UnknownChannel { line: u32, name: String },
    #[error("policy is invalid:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

/// Parses and validates.
pub fn parse_policy(text: &str) -> Result<Policy, PolicyError> {
    let p = parse_policy_unchecked(text)?;
    let diags = validate_policy(&p);
    if diags.is_empty() {
        Ok(p)
    } else {
        Err(PolicyError::Invalid(diags))
    }
}

/// Parses without running [`validate_policy`].
pub fn parse_policy_unchecked(text: &str) -> Result<Policy, PolicyError> {
    let doc = xml::parse_document(text)?;
    let root = doc.root_element();
    let at = Located::new;
    xml::expect_name(at(root), "system")?;
    xml::allow_attrs(at(root), &["tick_rate", "ncpus"])?;
    let ncpus = parse_u64(at(root), "ncpus", attr(at(root), "ncpus")?)? as usize;
    let mut tick_rate = opt_attr(root, "tick_rate").map(|v| parse_u64(at(root), "tick_rate", v)).transpose()?;

    let mut subjects: Vec<Subject> = Vec::new();
    let mut channels: Vec<ChannelSpec> = Vec::new();
    let mut schedule = Vec::new();
    let mut routing_nodes = Vec::new();
    let mut channel_ref_lines = Vec::new();
    let mut sched_nodes = Vec::new();

    for child in root.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "subject" => {
                let loc = at(child);
                xml::allow_attrs(loc, &["name", "cpu", "ip", "sp"])?;
                let name = attr(loc, "name")?.to_string();
                if subjects.iter().any(|s| s.name == name) {
                    return Err(PolicyError::DuplicateSubject { line: loc.line(), name });
                }
                let mut subject = Subject {
                    id: subjects.len(),
                    cpu: parse_u64(loc, "cpu", attr(loc, "cpu")?)? as usize,
                    entry_ip: hex_u64(loc, "ip", attr(loc, "ip")?)?,
                    entry_sp: hex_u64(loc, "sp", attr(loc, "sp")?)?,
                    name,
                    memory: Vec::new(),
                    channel_refs: Vec::new(),
                };
                for m in child.children().filter(Node::is_element) {
                    let ml = at(m);
                    match m.tag_name().name() {
                        "memory" => {
                            xml::allow_attrs(ml, &["logical", "virtual_address", "size", "rwe", "content"])?;
                            subject.memory.push(MemorySpec {
                                logical: attr(ml, "logical")?.to_string(),
                                va: hex_u64(ml, "virtual_address", attr(ml, "virtual_address")?)?,
                                size: xml::size_u64(ml, "size", attr(ml, "size")?)?,
                                perms: xml::parse_with(ml, "rwe", attr(ml, "rwe")?)?,
                                content: xml::parse_with(ml, "content", attr(ml, "content")?)?,
                            });
                        }
                        "channel_ref" => {
                            xml::allow_attrs(ml, &["name", "virtual_address", "writable"])?;
                            subject.channel_refs.push(ChannelRef {
                                channel: attr(ml, "name")?.to_string(),
                                va: hex_u64(ml, "virtual_address", attr(ml, "virtual_address")?)?,
                                writable: parse_bool(ml, "writable", attr(ml, "writable")?)?,
                            });
                            channel_ref_lines.push((subject.id, subject.channel_refs.len() - 1, ml.line()));
                        }
                        _ => return Err(xml::unknown_element(ml).into()),
                    }
                }
                subjects.push(subject);
            }
            "channels" => {
                xml::allow_attrs(at(child), &[])?;
                for c in child.children().filter(Node::is_element) {
                    let cl = at(c);
                    xml::expect_name(cl, "channel")?;
                    xml::allow_attrs(cl, &["name", "size"])?;
                    let name = attr(cl, "name")?.to_string();
                    if channels.iter().any(|x| x.name == name) {
                        return Err(PolicyError::DuplicateChannel { line: cl.line(), name });
                    }
                    channels.push(ChannelSpec { name, size: xml::size_u64(cl, "size", attr(cl, "size")?)? });
                }
            }
            "scheduling" => sched_nodes.push(child),
            "routing" => routing_nodes.push(child),
            _ => return Err(xml::unknown_element(at(child)).into()),
        }
    }

    for (sid, idx, line) in channel_ref_lines {
        let name = &subjects[sid].channel_refs[idx].channel;
        if !channels.iter().any(|c| &c.name == name) {
            return Err(PolicyError::UnknownChannel { line, name: name.clone() });
        }
    }

    for sched in sched_nodes {
        let sl = at(sched);
        xml::allow_attrs(sl, &["tick_rate"])?;
        if let Some(v) = opt_attr(sched, "tick_rate") {
            let r = parse_u64(sl, "tick_rate", v)?;
            match tick_rate {
                Some(t) if t != r => {
                    return Err(XmlError::BadValue {
                        line: sl.line(),
                        attr: "tick_rate".into(),
                        value: v.into(),
                        expected: "the system tick rate".into(),
                    }
                    .into())
                }
                _ => tick_rate = Some(r),
            }
        }
        for mf in sched.children().filter(Node::is_element) {
            let ml = at(mf);
            xml::expect_name(ml, "major_frame")?;
            xml::allow_attrs(ml, &[])?;
            let mut cpus = Vec::new();
            for cpu in mf.children().filter(Node::is_element) {
                let cl = at(cpu);
                xml::expect_name(cl, "cpu")?;
                xml::allow_attrs(cl, &["id"])?;
                let mut frames =
                    CpuFrameSpec { cpu: parse_u64(cl, "id", attr(cl, "id")?)? as usize, minor_frames: vec![] };
                for minor in cpu.children().filter(Node::is_element) {
                    let nl = at(minor);
                    xml::expect_name(nl, "minor_fr")?;
                    xml::allow_attrs(nl, &["sub_id", "ticks"])?;
                    let sub_id = parse_u64(nl, "sub_id", attr(nl, "sub_id")?)?;
                    if sub_id == 0 || sub_id as usize > subjects.len() {
                        return Err(PolicyError::UnknownSubject {
                            line: nl.line(),
                            reference: format!("sub_id={sub_id}"),
                        });
                    }
                    frames.minor_frames.push(MinorFrameSpec {
                        subject: sub_id as usize - 1,
                        ticks: parse_u64(nl, "ticks", attr(nl, "ticks")?)?,
                    });
                }
                cpus.push(frames);
            }
            schedule.push(MajorFrameSpec { cpus });
        }
    }

    let mut routing = Vec::new();
    for r in routing_nodes {
        xml::allow_attrs(at(r), &[])?;
        for irq in r.children().filter(Node::is_element) {
            let il = at(irq);
            xml::expect_name(il, "irq")?;
            xml::allow_attrs(il, &["vector", "subject", "dest_vector"])?;
            let name = attr(il, "subject")?;
            let subject = subjects
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| PolicyError::UnknownSubject { line: il.line(), reference: name.to_string() })?;
            routing.push(VectorRoutingEntry {
                vector: xml::parse_int::<u8>(il, "vector", attr(il, "vector")?)?,
                subject,
                dest_vector: xml::parse_int::<u8>(il, "dest_vector", attr(il, "dest_vector")?)?,
            });
        }
    }

    let tick_rate = tick_rate.ok_or(XmlError::MissingAttribute {
        line: at(root).line(),
        element: "system".into(),
        attr: "tick_rate".into(),
    })?;
    Ok(Policy { tick_rate, ncpus, subjects, channels, schedule, routing })
}

// --- Validation -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiagnosticKind {
    NoCpus,
    NoMajorFrames,
    CpuOutOfRange,
    MissingCpu,
    DuplicateCpu,
    EmptyCpuSchedule,
    TicksOutOfRange,
    WrongCpu,
    MajorFrameLengthMismatch,
    NotPageAligned,
    EmptyComponent,
    AddressOutOfRange,
    VirtualOverlap,
    DuplicateAttachment,
    TooFewAttachments,
    DuplicateVector,
    DestVectorOutOfRange,
    ZeroTickRate,
}

impl DiagnosticKind {
    pub fn message(self) -> &'static str {
        match self {
            DiagnosticKind::NoCpus => "no cpus",
            DiagnosticKind::NoMajorFrames => "no major frames",
            DiagnosticKind::CpuOutOfRange => "cpu out of range",
            DiagnosticKind::MissingCpu => "cpu missing from major frame",
            DiagnosticKind::DuplicateCpu => "cpu listed twice in major frame",
            DiagnosticKind::EmptyCpuSchedule => "cpu has no minor frames",
            DiagnosticKind::TicksOutOfRange => "ticks out of range",
            DiagnosticKind::WrongCpu => "subject scheduled on a cpu it is not assigned to",
            DiagnosticKind::MajorFrameLengthMismatch => "major frame length mismatch",
            DiagnosticKind::NotPageAligned => "component not page aligned",
            DiagnosticKind::EmptyComponent => "component has zero size",
            DiagnosticKind::AddressOutOfRange => "virtual address beyond 48 bits",
            DiagnosticKind::VirtualOverlap => "virtual components overlap",
            DiagnosticKind::DuplicateAttachment => "channel attached twice to one subject",
            DiagnosticKind::TooFewAttachments => "channel needs at least two attachments",
            DiagnosticKind::DuplicateVector => "routing vector listed twice",
            DiagnosticKind::DestVectorOutOfRange => "destination vector out of range",
            DiagnosticKind::ZeroTickRate => "tick rate must be positive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    /// Where in the policy, e.g. `major_frame 1, cpu 0`.
    pub locus: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, locus: impl Into<String>) -> Self {
        Self { kind, locus: locus.into() }
    }

    pub fn message(&self) -> &'static str {
        self.kind.message()
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.locus, self.kind.message())
    }
}

pub fn validate_policy(p: &Policy) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut d = Vec::new();
    if p.tick_rate == 0 {
        d.push(Diagnostic::new(ZeroTickRate, "system"));
    }
    if p.ncpus == 0 {
        d.push(Diagnostic::new(NoCpus, "system"));
    }
    for s in &p.subjects {
        if s.cpu >= p.ncpus {
            d.push(Diagnostic::new(CpuOutOfRange, format!("subject {}", s.name)));
        }
    }

    if p.schedule.is_empty() {
        d.push(Diagnostic::new(NoMajorFrames, "scheduling"));
    }
    for (mi, mf) in p.schedule.iter().enumerate() {
        let mut seen = vec![false; p.ncpus];
        let mut lengths = Vec::new();
        for cf in &mf.cpus {
            let locus = format!("major_frame {mi}, cpu {}", cf.cpu);
            if cf.cpu >= p.ncpus {
                d.push(Diagnostic::new(CpuOutOfRange, locus));
                continue;
            }
            if std::mem::replace(&mut seen[cf.cpu], true) {
                d.push(Diagnostic::new(DuplicateCpu, locus.clone()));
            }
            if cf.minor_frames.is_empty() {
                d.push(Diagnostic::new(EmptyCpuSchedule, locus.clone()));
            }
            for (ni, m) in cf.minor_frames.iter().enumerate() {
                let locus = format!("{locus}, minor_frame {ni}");
                if m.ticks == 0 || m.ticks >= MAX_TICKS {
                    d.push(Diagnostic::new(TicksOutOfRange, locus.clone()));
                }
                if p.subjects.get(m.subject).is_some_and(|s| s.cpu != cf.cpu) {
                    d.push(Diagnostic::new(WrongCpu, locus));
                }
            }
            lengths.push(cf.minor_frames.iter().map(|m| m.ticks).sum::<u64>());
        }
        for (cpu, present) in seen.iter().enumerate() {
            if !present {
                d.push(Diagnostic::new(MissingCpu, format!("major_frame {mi}, cpu {cpu}")));
            }
        }
        if lengths.windows(2).any(|w| w[0] != w[1]) {
            d.push(Diagnostic::new(MajorFrameLengthMismatch, format!("major_frame {mi}")));
        }
    }

    for c in &p.channels {
        let locus = format!("channel {}", c.name);
        if !is_page_aligned(c.size) {
            d.push(Diagnostic::new(NotPageAligned, locus.clone()));
        }
        if c.size == 0 {
            d.push(Diagnostic::new(EmptyComponent, locus.clone()));
        }
        if p.attachments(&c.name).len() < 2 {
            d.push(Diagnostic::new(TooFewAttachments, locus));
        }
    }

    for s in &p.subjects {
        let mut seen_channels = HashMap::new();
        for c in &s.channel_refs {
            if seen_channels.insert(c.channel.as_str(), ()).is_some() {
                d.push(Diagnostic::new(DuplicateAttachment, format!("subject {}, channel {}", s.name, c.channel)));
            }
        }
        let mut ranges = Vec::new();
        for r in p.regions(s) {
            let locus = format!("subject {}, {}", s.name, r.logical);
            if !is_page_aligned(r.va) || !is_page_aligned(r.size) {
                d.push(Diagnostic::new(NotPageAligned, locus.clone()));
            }
            if r.size == 0 {
                d.push(Diagnostic::new(EmptyComponent, locus.clone()));
            }
            if r.va.checked_add(r.size).is_none_or(|end| end > VA_LIMIT) {
                d.push(Diagnostic::new(AddressOutOfRange, locus.clone()));
            }
            ranges.push((r.va, r.va.saturating_add(r.size), locus));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                d.push(Diagnostic::new(VirtualOverlap, format!("{} / {}", w[0].2, w[1].2)));
            }
        }
    }

    let mut vectors = BTreeMap::new();
    for r in &p.routing {
        if vectors.insert(r.vector, ()).is_some() {
            d.push(Diagnostic::new(DuplicateVector, format!("irq {}", r.vector)));
        }
        if r.dest_vector >= NUM_EVENT_VECTORS {
            d.push(Diagnostic::new(DestVectorOutOfRange, format!("irq {}", r.vector)));
        }
    }
    d
}

// --- Serialization --------------------------------------------------------

pub fn serialize_policy(p: &Policy) -> String {
    let e = xml::escape;
    let mut out = String::new();
    let _ = writeln!(out, r#"<system tick_rate="{}" ncpus="{}">"#, p.tick_rate, p.ncpus);
    for s in &p.subjects {
        let _ = writeln!(
            out,
            r#" <subject name="{}" cpu="{}" ip="{:#x}" sp="{:#x}">"#,
            e(&s.name),
            s.cpu,
            s.entry_ip,
            s.entry_sp
        );
        for m in &s.memory {
            let _ = writeln!(
                out,
                r#"  <memory logical="{}" virtual_address="{:#x}" size="{:#x}" rwe="{}" content="{}"/>"#,
                e(&m.logical),
                m.va,
                m.size,
                m.perms,
                e(&m.content.to_string())
            );
        }
        for c in &s.channel_refs {
            let _ = writeln!(
                out,
                r#"  <channel_ref name="{}" virtual_address="{:#x}" writable="{}"/>"#,
                e(&c.channel),
                c.va,
                c.writable
            );
        }
        let _ = writeln!(out, " </subject>");
    }
    let _ = writeln!(out, " <channels>");
    for c in &p.channels {
        let _ = writeln!(out, r#"  <channel name="{}" size="{:#x}"/>"#, e(&c.name), c.size);
    }
    let _ = writeln!(out, " </channels>");
    let _ = writeln!(out, r#" <scheduling tick_rate="{}">"#, p.tick_rate);
    for mf in &p.schedule {
        let _ = writeln!(out, "  <major_frame>");
        for cf in &mf.cpus {
            let _ = writeln!(out, r#"   <cpu id="{}">"#, cf.cpu);
            for m in &cf.minor_frames {
                let _ = writeln!(out, r#"    <minor_fr sub_id="{}" ticks="{}"/>"#, m.subject + 1, m.ticks);
            }
            let _ = writeln!(out, "   </cpu>");
        }
        let _ = writeln!(out, "  </major_frame>");
    }
    let _ = writeln!(out, " </scheduling>");
    let _ = writeln!(out, " <routing>");
    for r in &p.routing {
        let _ = writeln!(
            out,
            r#"  <irq vector="{}" subject="{}" dest_vector="{}"/>"#,
            r.vector,
            e(&p.subjects[r.subject].name),
            r.dest_vector
        );
    }
    let _ = writeln!(out, " </routing>");
    out.push_str("</system>\n");
    out
}
