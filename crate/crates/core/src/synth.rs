//! Random valid policies with runnable subject programs, for property
//! tests, fuzzing and benchmarks.

use crate::content::{ContentResolver, ContentSource};
use crate::isa::{assemble, Instruction, Reg, INSTRUCTION_SIZE};
use crate::paging::{Permissions, PAGE_SIZE};
use crate::policy::{
    validate_policy, ChannelRef, ChannelSpec, CpuFrameSpec, MajorFrameSpec, MemorySpec, MinorFrameSpec, Policy,
    Subject, VectorRoutingEntry,
};
use rand::seq::SliceRandom;
use rand::Rng;
use std::ops::RangeInclusive;

/// Size classes of generated configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// At most 3 subjects of at most 16 pages, all below 2^22.
    Micro,
    /// 2 to 4 CPUs, 4 to 16 subjects, at least one channel.
    Lockstep,
    /// 16 subjects on 4 CPUs with at least 32 MiB of memory in total.
    DeskScale,
    /// Small configurations every fault switch applies to: two or more
    /// channels, each with a writer, and two or more subjects with writable
    /// private pages.
    FaultCapable,
}

#[derive(Clone, Debug)]
struct Shape {
    cpus: RangeInclusive<usize>,
    subjects: RangeInclusive<usize>,
    channels: RangeInclusive<usize>,
    /// Private data regions per subject and their size in pages.
    data_regions: RangeInclusive<usize>,
    data_pages: RangeInclusive<u64>,
    channel_pages: RangeInclusive<u64>,
    /// Virtual addresses stay below this.
    va_limit: u64,
    major_frames: RangeInclusive<usize>,
    frame_ticks: RangeInclusive<u64>,
    routes: RangeInclusive<usize>,
    /// Fill data regions with random bytes rather than a fill byte.
    random_data: bool,
}

impl Preset {
    fn shape(self) -> Shape {
        match self {
            Preset::Micro => Shape {
                cpus: 1..=2,
                subjects: 1..=3,
                channels: 0..=2,
                data_regions: 1..=3,
                data_pages: 1..=3,
                channel_pages: 1..=2,
                va_limit: 1 << 22,
                major_frames: 1..=2,
                frame_ticks: 4..=40,
                routes: 0..=2,
                random_data: true,
            },
            Preset::Lockstep => Shape {
                cpus: 2..=4,
                subjects: 4..=16,
                channels: 1..=4,
                data_regions: 1..=2,
                data_pages: 1..=3,
                channel_pages: 1..=2,
                va_limit: 1 << 32,
                major_frames: 1..=3,
                frame_ticks: 8..=60,
                routes: 1..=6,
                random_data: true,
            },
            Preset::DeskScale => Shape {
                cpus: 4..=4,
                subjects: 16..=16,
                channels: 4..=8,
                data_regions: 2..=2,
                data_pages: 256..=320,
                channel_pages: 1..=16,
                va_limit: 1 << 32,
                major_frames: 2..=2,
                frame_ticks: 100..=200,
                routes: 4..=8,
                random_data: false,
            },
            Preset::FaultCapable => Shape {
                cpus: 1..=3,
                subjects: 2..=6,
                channels: 2..=4,
                data_regions: 1..=2,
                data_pages: 1..=3,
                channel_pages: 1..=2,
                va_limit: 1 << 32,
                major_frames: 1..=2,
                frame_ticks: 8..=40,
                routes: 0..=3,
                random_data: true,
            },
        }
    }
}

/// A generated policy together with the in-memory content files it names.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub policy: Policy,
    pub resolver: ContentResolver,
}

pub const CODE_VA: u64 = 0x1000;

/// Consecutive page-aligned regions from `start`, separated by random gaps.
/// Outside the micro preset an occasional large jump spreads regions over
/// several page-table structures.
fn place(rng: &mut impl Rng, cursor: &mut u64, pages: u64, limit: u64) -> u64 {
    let gap = rng.gen_range(0..=2) * PAGE_SIZE;
    let mut va = *cursor + gap;
    if limit > 1 << 22 && rng.gen_bool(0.3) {
        let jump = rng.gen_range(1..=16u64) << 21;
        if va + jump + pages * PAGE_SIZE < limit / 2 {
            va += jump;
        }
    }
    *cursor = va + pages * PAGE_SIZE;
    assert!(*cursor <= limit, "placement exceeded the address limit");
    va
}

struct Layout {
    code_pages: u64,
    data: Vec<(u64, u64, Permissions)>,
    channels: Vec<(usize, u64, bool)>,
}

/// The subject's loop: touches each accessible data page, reads the
/// interrupt register, makes a hypercall and jumps back to the start.
fn program(rng: &mut impl Rng, layout: &Layout, channel_pages: &[u64], halts: bool) -> Vec<Instruction> {
    let mut p = vec![Instruction::movi(Reg::R2, rng.gen_range(1..256))];
    let mut touch = |p: &mut Vec<Instruction>, base: u64, pages: u64, writable: bool| {
        for i in 0..pages {
            let va = base + i * PAGE_SIZE + rng.gen_range(0..PAGE_SIZE);
            p.push(Instruction::movi(Reg::R3, u32::try_from(va).expect("addresses below 2^32")));
            p.push(Instruction::loadb(Reg::R1, Reg::R3, 0));
            if writable {
                p.push(Instruction::add(Reg::R1, Reg::R2));
                p.push(Instruction::storeb(Reg::R3, Reg::R1, 0));
            }
        }
    };
    for &(va, pages, perms) in &layout.data {
        touch(&mut p, va, pages, perms.w);
    }
    for (&(_, va, writable), &pages) in layout.channels.iter().zip(channel_pages) {
        touch(&mut p, va, pages, writable);
    }
    p.push(Instruction::rdir(Reg::R0));
    p.push(Instruction::add(Reg::R2, Reg::R0));
    if halts {
        p.push(Instruction::hlt());
    }
    p.push(Instruction::vmcall());
    p.push(Instruction::jmp(CODE_VA as u32));
    p
}

/// Splits `total` ticks into `parts` positive pieces.
fn split_ticks(rng: &mut impl Rng, total: u64, parts: usize) -> Vec<u64> {
    let mut cuts: Vec<u64> = (1..total).collect::<Vec<_>>().choose_multiple(rng, parts - 1).copied().collect();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let d = c - prev;
            prev = c;
            d
        })
        .collect()
}

pub fn random_config(preset: Preset, rng: &mut impl Rng) -> SynthConfig {
    let shape = preset.shape();
    let ncpus = rng.gen_range(shape.cpus.clone());
    let nsubs = rng.gen_range(shape.subjects.clone()).max(ncpus);
    let mut nchan = rng.gen_range(shape.channels.clone());
    if nsubs < 2 {
        nchan = 0;
    }

    // every CPU gets at least one subject
    let mut cpu_of: Vec<usize> = (0..nsubs).map(|s| if s < ncpus { s } else { rng.gen_range(0..ncpus) }).collect();
    cpu_of.shuffle(rng);

    let channels: Vec<ChannelSpec> = (0..nchan)
        .map(|i| ChannelSpec { name: format!("chan{i}"), size: rng.gen_range(shape.channel_pages.clone()) * PAGE_SIZE })
        .collect();
    // attachments: a writer plus one or two other subjects
    let mut attach: Vec<Vec<(usize, bool)>> = vec![Vec::new(); nsubs];
    for c in 0..nchan {
        let k = rng.gen_range(2..=nsubs.min(3));
        let members: Vec<usize> = (0..nsubs).collect::<Vec<_>>().choose_multiple(rng, k).copied().collect();
        for (i, &s) in members.iter().enumerate() {
            attach[s].push((c, i == 0 || rng.gen_bool(0.2)));
        }
    }

    let nroutes = rng.gen_range(shape.routes.clone());
    let vectors: Vec<u8> = (0..=255u8).collect::<Vec<_>>().choose_multiple(rng, nroutes).copied().collect::<Vec<_>>();
    let routing: Vec<VectorRoutingEntry> = vectors
        .into_iter()
        .map(|vector| VectorRoutingEntry {
            vector,
            subject: rng.gen_range(0..nsubs),
            dest_vector: rng.gen_range(0..64),
        })
        .collect();

    let mut resolver = ContentResolver::new(".");
    let mut subjects = Vec::with_capacity(nsubs);
    for s in 0..nsubs {
        let name = format!("sub{s}");
        let mut cursor = CODE_VA;
        let nregions = rng.gen_range(shape.data_regions.clone());
        let mut layout = Layout { code_pages: 0, data: Vec::new(), channels: Vec::new() };
        let mut data_pages = Vec::new();
        for i in 0..nregions {
            let pages = rng.gen_range(shape.data_pages.clone());
            // the first region is always writable
            let perms = if i == 0 || rng.gen_bool(0.7) { Permissions::RW } else { Permissions::RO };
            data_pages.push((pages, perms));
        }
        let channel_pages: Vec<u64> = attach[s].iter().map(|&(c, _)| channels[c].size / PAGE_SIZE).collect();
        // instruction count bounds the code size
        let touches: u64 = data_pages.iter().map(|d| d.0).sum::<u64>() + channel_pages.iter().sum::<u64>();
        let max_instrs = 1 + 4 * touches + 5;
        layout.code_pages = (max_instrs * INSTRUCTION_SIZE as u64).div_ceil(PAGE_SIZE);
        cursor += layout.code_pages * PAGE_SIZE;
        for &(pages, perms) in &data_pages {
            let va = place(rng, &mut cursor, pages, shape.va_limit);
            layout.data.push((va, pages, perms));
        }
        for (&(c, writable), &pages) in attach[s].iter().zip(&channel_pages) {
            let va = place(rng, &mut cursor, pages, shape.va_limit);
            layout.channels.push((c, va, writable));
        }

        // destinations of routed interrupts sometimes wait for them
        let halts = routing.iter().any(|r| r.subject == s) && rng.gen_bool(0.5);
        let code = assemble(&program(rng, &layout, &channel_pages, halts));
        let code_path = format!("code/{name}.bin");
        resolver.insert(code_path.clone(), code);
        let mut memory = vec![MemorySpec {
            logical: "code".into(),
            va: CODE_VA,
            size: layout.code_pages * PAGE_SIZE,
            perms: Permissions::RX,
            content: ContentSource::File(code_path),
        }];
        for (i, &(va, pages, perms)) in layout.data.iter().enumerate() {
            let size = pages * PAGE_SIZE;
            let content = if shape.random_data {
                let path = format!("data/{name}.{i}.bin");
                let mut bytes = vec![0u8; size as usize];
                rng.fill(&mut bytes[..]);
                resolver.insert(path.clone(), bytes);
                ContentSource::File(path)
            } else {
                ContentSource::Fill(rng.gen())
            };
            memory.push(MemorySpec { logical: format!("data{i}"), va, size, perms, content });
        }
        let stack_top = layout.data[0].0 + layout.data[0].1 * PAGE_SIZE - 8;
        subjects.push(Subject {
            name,
            id: s,
            cpu: cpu_of[s],
            entry_ip: CODE_VA,
            entry_sp: stack_top,
            memory,
            channel_refs: layout
                .channels
                .iter()
                .map(|&(c, va, writable)| ChannelRef { channel: channels[c].name.clone(), va, writable })
                .collect(),
        });
    }

    let nmf = rng.gen_range(shape.major_frames.clone());
    let schedule = (0..nmf)
        .map(|_| {
            let busiest = (0..ncpus).map(|cpu| cpu_of.iter().filter(|&&c| c == cpu).count()).max().unwrap_or(1) as u64;
            let len = rng.gen_range(shape.frame_ticks.clone()).max(busiest);
            MajorFrameSpec {
                cpus: (0..ncpus)
                    .map(|cpu| {
                        let mine: Vec<usize> = (0..nsubs).filter(|&s| cpu_of[s] == cpu).collect();
                        let parts = rng.gen_range(mine.len()..=(mine.len() + 1).min(len as usize));
                        let minor_frames = split_ticks(rng, len, parts)
                            .into_iter()
                            .enumerate()
                            .map(|(i, ticks)| MinorFrameSpec {
                                // every subject on the CPU gets a frame
                                subject: if i < mine.len() {
                                    mine[i]
                                } else {
                                    *mine.choose(rng).expect("cpu has subjects")
                                },
                                ticks,
                            })
                            .collect();
                        CpuFrameSpec { cpu, minor_frames }
                    })
                    .collect(),
            }
        })
        .collect();

    let policy = Policy { tick_rate: 10_000, ncpus, subjects, channels, schedule, routing };
    debug_assert!(validate_policy(&policy).is_empty(), "{:?}", validate_policy(&policy));
    SynthConfig { policy, resolver }
}

/// A set of subjects each holding `pages` pages in one region; used to time
/// the validity check.
pub fn wide_config(nsubs: usize, pages: u64, rng: &mut impl Rng) -> SynthConfig {
    let mut resolver = ContentResolver::new(".");
    let prog = assemble(&[Instruction::jmp(CODE_VA as u32)]);
    resolver.insert("code/loop.bin", prog);
    let subjects = (0..nsubs)
        .map(|s| {
            let data_va = (CODE_VA + PAGE_SIZE) + (rng.gen_range(0..64u64) << 21);
            Subject {
                name: format!("sub{s}"),
                id: s,
                cpu: 0,
                entry_ip: CODE_VA,
                entry_sp: data_va + 0x1000 - 8,
                memory: vec![
                    MemorySpec {
                        logical: "code".into(),
                        va: CODE_VA,
                        size: PAGE_SIZE,
                        perms: Permissions::RX,
                        content: ContentSource::File("code/loop.bin".into()),
                    },
                    MemorySpec {
                        logical: "data".into(),
                        va: data_va,
                        size: pages * PAGE_SIZE,
                        perms: Permissions::RW,
                        content: ContentSource::Fill(s as u8),
                    },
                ],
                channel_refs: Vec::new(),
            }
        })
        .collect();
    let schedule = vec![MajorFrameSpec {
        cpus: vec![CpuFrameSpec {
            cpu: 0,
            minor_frames: (0..nsubs).map(|s| MinorFrameSpec { subject: s, ticks: 10 }).collect(),
        }],
    }];
    let policy = Policy { tick_rate: 10_000, ncpus: 1, subjects, channels: Vec::new(), schedule, routing: Vec::new() };
    SynthConfig { policy, resolver }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolchain::{generate, GenOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_validate_and_generate() {
        for preset in [Preset::Micro, Preset::Lockstep, Preset::FaultCapable] {
            for seed in 0..30 {
                let c = random_config(preset, &mut ChaCha8Rng::seed_from_u64(seed));
                assert!(validate_policy(&c.policy).is_empty(), "{preset:?} {seed}: {:?}", validate_policy(&c.policy));
                let a = generate(&c.policy, c.resolver.clone(), &GenOptions::default()).unwrap();
                assert!(crate::harness::check_artifacts(&a).passed(), "{preset:?} {seed}");
            }
        }
    }

    #[test]
    fn micro_bounds() {
        for seed in 0..50 {
            let c = random_config(Preset::Micro, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(c.policy.subjects.len() <= 3);
            for s in &c.policy.subjects {
                let pages: u64 = c.policy.regions(s).map(|r| r.size / PAGE_SIZE).sum();
                assert!(pages <= 16, "{pages}");
                assert!(c.policy.regions(s).all(|r| r.va + r.size <= 1 << 22));
            }
        }
    }

    #[test]
    fn fault_capable_shape() {
        for seed in 0..30 {
            let c = random_config(Preset::FaultCapable, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(c.policy.channels.len() >= 2);
            assert!(c.policy.subjects.len() >= 2);
            for ch in &c.policy.channels {
                assert!(c.policy.attachments(&ch.name).iter().any(|(_, r)| r.writable));
            }
        }
    }

    #[test]
    fn desk_scale_is_large() {
        let c = random_config(Preset::DeskScale, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((c.policy.subjects.len(), c.policy.ncpus), (16, 4));
        let total: u64 = c.policy.subjects.iter().flat_map(|s| c.policy.regions(s)).map(|r| r.size).sum();
        assert!(total >= 32 << 20, "{total}");
    }
}
