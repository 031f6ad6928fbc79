//! The eight-instruction guest ISA shared by both separation-kernel machines.
//!
//! Every instruction is exactly eight bytes:
//!
//! ```text
//! +--------+------+------+-----+-----------------+
//! | opcode | reg1 | reg2 | pad | imm (u32, LE)   |
//! +--------+------+------+-----+-----------------+
//! ```
//!
//! Memory is byte addressed and only single bytes move between registers
//! and memory. `LOADB` and `STOREB` address `reg + imm`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INSTRUCTION_SIZE: usize = 8;
pub const NUM_GP_REGS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    /// `reg1 := imm`
    Movi = 0x01,
    /// low byte of `reg1 := mem[reg2 + imm]`
    Loadb = 0x02,
    /// `mem[reg1 + imm] := low byte of reg2`
    Storeb = 0x03,
    /// `reg1 := reg1 + reg2` (wrapping)
    Add = 0x04,
    /// `ip := imm`
    Jmp = 0x05,
    /// `reg1 := ir; ir := 0`
    Rdir = 0x06,
    /// Hypercall. Causes a VM exit on the concrete machine, otherwise a no-op.
    Vmcall = 0x07,
    /// Wait for an injected interrupt: `ip` only advances once `ir != 0`.
    Hlt = 0x08,
}

impl Opcode {
    pub const ALL: [Opcode; 8] = [
        Opcode::Movi,
        Opcode::Loadb,
        Opcode::Storeb,
        Opcode::Add,
        Opcode::Jmp,
        Opcode::Rdir,
        Opcode::Vmcall,
        Opcode::Hlt,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|op| *op as u8 == b)
    }
}

/// A general purpose register index, `R0..=R3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);

    pub fn new(index: u8) -> Option<Self> {
        (usize::from(index) < NUM_GP_REGS).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub reg1: Reg,
    pub reg2: Reg,
    pub imm: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("illegal instruction bytes {bytes:02x?}")]
pub struct IllegalInstruction {
    pub bytes: [u8; INSTRUCTION_SIZE],
}

impl Instruction {
    pub fn new(opcode: Opcode, reg1: Reg, reg2: Reg, imm: u32) -> Self {
        Self { opcode, reg1, reg2, imm }
    }

    pub fn movi(dst: Reg, imm: u32) -> Self {
        Self::new(Opcode::Movi, dst, Reg::R0, imm)
    }

    pub fn loadb(dst: Reg, base: Reg, disp: u32) -> Self {
        Self::new(Opcode::Loadb, dst, base, disp)
    }

    pub fn storeb(base: Reg, src: Reg, disp: u32) -> Self {
        Self::new(Opcode::Storeb, base, src, disp)
    }

    pub fn add(dst: Reg, src: Reg) -> Self {
        Self::new(Opcode::Add, dst, src, 0)
    }

    pub fn jmp(target: u32) -> Self {
        Self::new(Opcode::Jmp, Reg::R0, Reg::R0, target)
    }

    pub fn rdir(dst: Reg) -> Self {
        Self::new(Opcode::Rdir, dst, Reg::R0, 0)
    }

    pub fn vmcall() -> Self {
        Self::new(Opcode::Vmcall, Reg::R0, Reg::R0, 0)
    }

    pub fn hlt() -> Self {
        Self::new(Opcode::Hlt, Reg::R0, Reg::R0, 0)
    }

    pub fn encode(&self) -> [u8; INSTRUCTION_SIZE] {
        let imm = self.imm.to_le_bytes();
        [self.opcode as u8, self.reg1.0, self.reg2.0, 0, imm[0], imm[1], imm[2], imm[3]]
    }

    /// Decodes eight bytes. Unknown opcodes, register bytes above 3 and a
    /// non-zero pad byte are all illegal.
    pub fn decode(bytes: &[u8; INSTRUCTION_SIZE]) -> Result<Self, IllegalInstruction> {
        let illegal = IllegalInstruction { bytes: *bytes };
        let opcode = Opcode::from_byte(bytes[0]).ok_or(illegal)?;
        let reg1 = Reg::new(bytes[1]).ok_or(illegal)?;
        let reg2 = Reg::new(bytes[2]).ok_or(illegal)?;
        if bytes[3] != 0 {
            return Err(illegal);
        }
        let imm = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        Ok(Self { opcode, reg1, reg2, imm })
    }
}

/// Assemble a program into its byte image.
pub fn assemble(program: &[Instruction]) -> Vec<u8> {
    program.iter().flat_map(|i| i.encode()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegisterFile {
    pub gp: [u64; NUM_GP_REGS],
    pub ip: u64,
    pub sp: u64,
    /// Injected interrupt, `vector + 1`; zero when nothing is pending.
    pub ir: u64,
}

impl RegisterFile {
    pub fn at_entry(ip: u64, sp: u64) -> Self {
        Self { gp: [0; NUM_GP_REGS], ip, sp, ir: 0 }
    }
}

/// Why an access failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Fetch,
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum GuestFault {
    #[error("{kind:?} access to {va:#x} denied")]
    Access { va: u64, kind: AccessKind },
    #[error(transparent)]
    Illegal(#[from] IllegalInstruction),
}

/// The memory interface a machine offers to the interpreter. Each call
/// performs its own permission check.
pub trait GuestMemory {
    fn read(&mut self, va: u64, kind: AccessKind) -> Result<u8, GuestFault>;
    fn write(&mut self, va: u64, value: u8) -> Result<(), GuestFault>;
}

/// What the surrounding machine has to do after a successful step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Effect {
    Continue,
    Hypercall,
}

pub fn fetch(regs: &RegisterFile, mem: &mut impl GuestMemory) -> Result<Instruction, GuestFault> {
    let mut bytes = [0u8; INSTRUCTION_SIZE];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = mem.read(regs.ip.wrapping_add(i as u64), AccessKind::Fetch)?;
    }
    Ok(Instruction::decode(&bytes)?)
}

/// Executes one already-fetched instruction. Registers are only updated when
/// the instruction completes.
pub fn execute(instr: Instruction, regs: &mut RegisterFile, mem: &mut impl GuestMemory) -> Result<Effect, GuestFault> {
    let next_ip = regs.ip.wrapping_add(INSTRUCTION_SIZE as u64);
    let r1 = instr.reg1.index();
    let r2 = instr.reg2.index();
    let mut effect = Effect::Continue;
    match instr.opcode {
        Opcode::Movi => {
            regs.gp[r1] = u64::from(instr.imm);
            regs.ip = next_ip;
        }
        Opcode::Loadb => {
            let va = regs.gp[r2].wrapping_add(u64::from(instr.imm));
            let byte = mem.read(va, AccessKind::Read)?;
            regs.gp[r1] = (regs.gp[r1] & !0xff) | u64::from(byte);
            regs.ip = next_ip;
        }
        Opcode::Storeb => {
            let va = regs.gp[r1].wrapping_add(u64::from(instr.imm));
            mem.write(va, regs.gp[r2] as u8)?;
            regs.ip = next_ip;
        }
        Opcode::Add => {
            regs.gp[r1] = regs.gp[r1].wrapping_add(regs.gp[r2]);
            regs.ip = next_ip;
        }
        Opcode::Jmp => regs.ip = u64::from(instr.imm),
        Opcode::Rdir => {
            regs.gp[r1] = regs.ir;
            regs.ir = 0;
            regs.ip = next_ip;
        }
        Opcode::Vmcall => {
            effect = Effect::Hypercall;
            regs.ip = next_ip;
        }
        Opcode::Hlt => {
            if regs.ir != 0 {
                regs.ip = next_ip;
            }
        }
    }
    Ok(effect)
}

/// Fetch, decode and execute the instruction at `regs.ip`.
pub fn step(regs: &mut RegisterFile, mem: &mut impl GuestMemory) -> Result<Effect, GuestFault> {
    let instr = fetch(regs, mem)?;
    execute(instr, regs, mem)
}

/// Lowest pending vector is moved into `ir` when the subject has no
/// undelivered interrupt. Returns whether an injection happened.
pub fn inject_pending(regs: &mut RegisterFile, pending: &mut u64) -> bool {
    if *pending == 0 || regs.ir != 0 {
        return false;
    }
    let vector = pending.trailing_zeros();
    *pending &= !(1u64 << vector);
    regs.ir = u64::from(vector) + 1;
    true
}
