//! The B-policy: physical memory components and each subject's virtual
//! components referring to them by name.

use crate::content::ContentSource;
use crate::paging::{is_page_aligned, Permissions, PAGE_SIZE};
use crate::xml::{self, attr, hex_u64, parse_bool, Located, XmlError};
use roxmltree::Node;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysComponent {
    pub name: String,
    pub address: u64,
    pub size: u64,
    pub content: ContentSource,
}

impl PhysComponent {
    pub fn end(&self) -> u64 {
        self.address + self.size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtComponent {
    pub logical: String,
    pub va: u64,
    pub size: u64,
    pub perms: Permissions,
    pub physical: String,
    pub channel: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BSubject {
    pub name: String,
    pub pt_base: u64,
    pub virt: Vec<VirtComponent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BPolicy {
    pub physical: Vec<PhysComponent>,
    pub subjects: Vec<BSubject>,
}

/// A valid page of a subject as the B-policy describes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageInfo<'a> {
    pub va: u64,
    pub pa: u64,
    pub perms: Permissions,
    pub channel: bool,
    pub phys: &'a PhysComponent,
    /// Offset of the page inside its physical component.
    pub offset: u64,
}

impl BPolicy {
    pub fn phys_index(&self) -> HashMap<&str, usize> {
        self.physical.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect()
    }

    pub fn phys(&self, name: &str) -> Option<&PhysComponent> {
        self.physical.iter().find(|p| p.name == name)
    }

    pub fn subject_index(&self, name: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.name == name)
    }

    /// Every valid 4 KiB page of subject `s` with its physical backing.
    /// Virtual components whose physical name is unknown are skipped.
    pub fn pages(&self, s: usize) -> Vec<PageInfo<'_>> {
        let index = self.phys_index();
        let mut out = Vec::new();
        for v in &self.subjects[s].virt {
            let Some(&pi) = index.get(v.physical.as_str()) else { continue };
            let phys = &self.physical[pi];
            for off in (0..v.size).step_by(PAGE_SIZE as usize) {
                out.push(PageInfo {
                    va: v.va + off,
                    pa: phys.address + off,
                    perms: v.perms,
                    channel: v.channel,
                    phys,
                    offset: off,
                });
            }
        }
        out
    }

    pub fn used_pages(&self) -> usize {
        self.subjects.iter().flat_map(|s| &s.virt).map(|v| (v.size / PAGE_SIZE) as usize).sum()
    }
}

#[derive(Debug, Error)]
pub enum BPolicyError {
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("line {line}: duplicate physical component {name:?}")]
    DuplicatePhysical { line: u32, name: String },
    #[error("line {line}: virtual component refers to unknown physical component {name:?}")]
    DanglingPhysical { line: u32, name: String },
    #[error("line {line}: virtual component {logical:?} has size {virt_size:#x} but physical {physical:?} has {phys_size:#x}")]
    SizeMismatch { line: u32, logical: String, physical: String, virt_size: u64, phys_size: u64 },
    #[error("line {line}: {what} {value:#x} is not page aligned")]
    NotPageAligned { line: u32, what: &'static str, value: u64 },
}

pub fn parse_bpolicy(text: &str) -> Result<BPolicy, BPolicyError> {
    let doc = xml::parse_document(text)?;
    let at = Located::new;
    let root = doc.root_element();
    xml::expect_name(at(root), "bpolicy")?;
    xml::allow_attrs(at(root), &[])?;
    let aligned = |loc: Located, what: &'static str, value: u64| {
        if is_page_aligned(value) {
            Ok(value)
        } else {
            Err(BPolicyError::NotPageAligned { line: loc.line(), what, value })
        }
    };

    let mut physical: Vec<PhysComponent> = Vec::new();
    let mut subjects = Vec::new();
    let mut virt_lines = Vec::new();
    for child in root.children().filter(Node::is_element) {
        let loc = at(child);
        match child.tag_name().name() {
            "physical" => {
                xml::allow_attrs(loc, &["name", "address", "size", "content"])?;
                let name = attr(loc, "name")?.to_string();
                if physical.iter().any(|p| p.name == name) {
                    return Err(BPolicyError::DuplicatePhysical { line: loc.line(), name });
                }
                physical.push(PhysComponent {
                    name,
                    address: aligned(loc, "address", hex_u64(loc, "address", attr(loc, "address")?)?)?,
                    size: aligned(loc, "size", xml::size_u64(loc, "size", attr(loc, "size")?)?)?,
                    content: xml::parse_with(loc, "content", attr(loc, "content")?)?,
                });
            }
            "subject" => {
                xml::allow_attrs(loc, &["name", "pt_base"])?;
                let mut s = BSubject {
                    name: attr(loc, "name")?.to_string(),
                    pt_base: aligned(loc, "pt_base", hex_u64(loc, "pt_base", attr(loc, "pt_base")?)?)?,
                    virt: Vec::new(),
                };
                for v in child.children().filter(Node::is_element) {
                    let vl = at(v);
                    xml::expect_name(vl, "virt")?;
                    xml::allow_attrs(vl, &["logical", "virtual_address", "size", "rwe", "physical", "channel"])?;
                    s.virt.push(VirtComponent {
                        logical: attr(vl, "logical")?.to_string(),
                        va: aligned(
                            vl,
                            "virtual_address",
                            hex_u64(vl, "virtual_address", attr(vl, "virtual_address")?)?,
                        )?,
                        size: aligned(vl, "size", xml::size_u64(vl, "size", attr(vl, "size")?)?)?,
                        perms: xml::parse_with(vl, "rwe", attr(vl, "rwe")?)?,
                        physical: attr(vl, "physical")?.to_string(),
                        channel: parse_bool(vl, "channel", attr(vl, "channel")?)?,
                    });
                    virt_lines.push((subjects.len(), s.virt.len() - 1, vl.line()));
                }
                subjects.push(s);
            }
            _ => return Err(xml::unknown_element(loc).into()),
        }
    }

    let b = BPolicy { physical, subjects };
    let index = b.phys_index();
    for (s, v, line) in virt_lines {
        let virt = &b.subjects[s].virt[v];
        let Some(&pi) = index.get(virt.physical.as_str()) else {
            return Err(BPolicyError::DanglingPhysical { line, name: virt.physical.clone() });
        };
        let phys = &b.physical[pi];
        if phys.size != virt.size {
            return Err(BPolicyError::SizeMismatch {
                line,
                logical: virt.logical.clone(),
                physical: phys.name.clone(),
                virt_size: virt.size,
                phys_size: phys.size,
            });
        }
    }
    Ok(b)
}

pub fn serialize_bpolicy(b: &BPolicy) -> String {
    let e = xml::escape;
    let mut out = String::from("<bpolicy>\n");
    for p in &b.physical {
        let _ = writeln!(
            out,
            r#" <physical name="{}" address="{:#x}" size="{:#x}" content="{}"/>"#,
            e(&p.name),
            p.address,
            p.size,
            e(&p.content.to_string())
        );
    }
    for s in &b.subjects {
        let _ = writeln!(out, r#" <subject name="{}" pt_base="{:#x}">"#, e(&s.name), s.pt_base);
        for v in &s.virt {
            let _ = writeln!(
                out,
                r#"  <virt logical="{}" virtual_address="{:#x}" size="{:#x}" rwe="{}" physical="{}" channel="{}"/>"#,
                e(&v.logical),
                v.va,
                v.size,
                v.perms,
                e(&v.physical),
                v.channel
            );
        }
        let _ = writeln!(out, " </subject>");
    }
    out.push_str("</bpolicy>\n");
    out
}
