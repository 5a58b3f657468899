//! Single-core functional and timing model of a 4-stage in-order
//! single-issue pipeline.
//!
//! Timing rules: every instruction issues in one cycle; a taken branch or a
//! jump costs two extra cycles; hardware-loop back edges are free; a memory
//! instruction whose request is not granted stalls and re-presents it the
//! next cycle. Loads have no use penalty.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::format_instruction;
use crate::isa::{
    BranchCond, ImmOp, Instruction, InstructionClass, IsaError, LoadWidth, LoopOp, NnUpdate, RegOp, StoreWidth,
};
use crate::simd;

pub const TCDM_BASE: u32 = 0x1000_0000;
pub const CODE_BASE: u32 = 0x1C00_0000;
pub const BRANCH_PENALTY: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum MemFault {
    #[error("misaligned access at {0:#010x}")]
    Misaligned(u32),
    #[error("access outside memory at {0:#010x}")]
    OutOfRange(u32),
}

/// Byte-addressed data memory. `size` is 1, 2 or 4 and accesses must be
/// naturally aligned; loaded values are zero-extended.
pub trait DataMemory {
    fn load(&mut self, addr: u32, size: u32) -> Result<u32, MemFault>;
    fn store(&mut self, addr: u32, size: u32, value: u32) -> Result<(), MemFault>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub addr: u32,
    pub store: bool,
}

/// A memory that arbitrates requests. `request` returns whether the access
/// is granted in the current cycle.
pub trait MemoryPort: DataMemory {
    fn request(&mut self, core: usize, access: Access) -> bool;
}

/// Contiguous zero-contention memory.
#[derive(Debug, Clone)]
pub struct FlatMemory {
    base: u32,
    bytes: Vec<u8>,
}

impl FlatMemory {
    pub fn new(base: u32, size: usize) -> Self {
        FlatMemory { base, bytes: vec![0; size] }
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn offset(&self, addr: u32, size: u32) -> Result<usize, MemFault> {
        if !addr.is_multiple_of(size) {
            return Err(MemFault::Misaligned(addr));
        }
        let off = addr.wrapping_sub(self.base) as usize;
        if addr < self.base || off + size as usize > self.bytes.len() {
            return Err(MemFault::OutOfRange(addr));
        }
        Ok(off)
    }
}

impl DataMemory for FlatMemory {
    fn load(&mut self, addr: u32, size: u32) -> Result<u32, MemFault> {
        let off = self.offset(addr, size)?;
        let mut v = 0u32;
        for i in (0..size as usize).rev() {
            v = (v << 8) | self.bytes[off + i] as u32;
        }
        Ok(v)
    }

    fn store(&mut self, addr: u32, size: u32, value: u32) -> Result<(), MemFault> {
        let off = self.offset(addr, size)?;
        for i in 0..size as usize {
            self.bytes[off + i] = (value >> (8 * i)) as u8;
        }
        Ok(())
    }
}

impl MemoryPort for FlatMemory {
    fn request(&mut self, _core: usize, _access: Access) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrapCause {
    #[error("{0}")]
    Illegal(#[from] IsaError),
    #[error("{0}")]
    Memory(#[from] MemFault),
    #[error("pc outside program")]
    PcOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("core {core} trapped at pc {pc:#010x}, cycle {cycle}: {cause}")]
    Trap { core: usize, pc: u32, cycle: u64, cause: TrapCause },
    #[error("no halt within {0} cycles")]
    MaxCyclesExceeded(u64),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Decoded code memory. Words that fail to decode trap when executed.
#[derive(Debug, Clone)]
pub struct Program {
    base: u32,
    entry: u32,
    words: Vec<u32>,
    decoded: Vec<Result<Instruction, IsaError>>,
}

impl Program {
    pub fn new(base: u32, words: Vec<u32>, entry: u32) -> Self {
        let decoded = words.iter().map(|&w| crate::isa::decode(w)).collect();
        Program { base, entry, words, decoded }
    }

    /// Builds code memory from the image sections at or above [`CODE_BASE`];
    /// gaps between sections are filled with illegal (zero) words.
    pub fn from_image(img: &crate::asm::ProgramImage) -> Self {
        let code: Vec<_> = img.sections.iter().filter(|s| s.base >= CODE_BASE).collect();
        let Some(lo) = code.iter().map(|s| s.base).min() else {
            return Program::new(CODE_BASE, Vec::new(), img.entry);
        };
        let hi = code.iter().map(|s| s.base + 4 * s.words.len() as u32).max().unwrap_or(lo);
        let mut words = vec![0u32; ((hi - lo) / 4) as usize];
        for s in code {
            let at = ((s.base - lo) / 4) as usize;
            words[at..at + s.words.len()].copy_from_slice(&s.words);
        }
        Program::new(lo, words, img.entry)
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    #[inline]
    pub fn index_of(&self, pc: u32) -> Option<usize> {
        let off = pc.wrapping_sub(self.base);
        if !pc.is_multiple_of(4) || pc < self.base || (off / 4) as usize >= self.words.len() {
            None
        } else {
            Some((off / 4) as usize)
        }
    }

    #[inline]
    pub fn fetch(&self, pc: u32) -> Result<Instruction, TrapCause> {
        let i = self.index_of(pc).ok_or(TrapCause::PcOutOfRange)?;
        self.decoded[i].clone().map_err(TrapCause::Illegal)
    }
}

/// Instruction counts per class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub simd_mac: u64,
    pub load: u64,
    pub store: u64,
    pub mac_load: u64,
    pub alu_scalar: u64,
    pub simd_alu: u64,
    pub control_flow: u64,
    pub other: u64,
}

impl ClassCounts {
    pub fn get(&self, c: InstructionClass) -> u64 {
        match c {
            InstructionClass::SimdMac => self.simd_mac,
            InstructionClass::Load => self.load,
            InstructionClass::Store => self.store,
            InstructionClass::MacLoad => self.mac_load,
            InstructionClass::AluScalar => self.alu_scalar,
            InstructionClass::SimdAlu => self.simd_alu,
            InstructionClass::ControlFlow => self.control_flow,
            InstructionClass::Other => self.other,
        }
    }

    fn slot(&mut self, c: InstructionClass) -> &mut u64 {
        match c {
            InstructionClass::SimdMac => &mut self.simd_mac,
            InstructionClass::Load => &mut self.load,
            InstructionClass::Store => &mut self.store,
            InstructionClass::MacLoad => &mut self.mac_load,
            InstructionClass::AluScalar => &mut self.alu_scalar,
            InstructionClass::SimdAlu => &mut self.simd_alu,
            InstructionClass::ControlFlow => &mut self.control_flow,
            InstructionClass::Other => &mut self.other,
        }
    }

    pub fn bump(&mut self, c: InstructionClass) {
        *self.slot(c) += 1;
    }

    pub fn total(&self) -> u64 {
        InstructionClass::ALL.iter().map(|&c| self.get(c)).sum()
    }

    pub fn add(&mut self, other: &ClassCounts) {
        for c in InstructionClass::ALL {
            *self.slot(c) += other.get(c);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycles: u64,
    pub retired: u64,
    pub classes: ClassCounts,
    /// MAC-class instructions retired (plain SIMD dot products and fused
    /// mac&load instructions).
    pub simd_macs: u64,
    /// Scalar multiply-accumulates performed, `simd_macs` weighted by lanes.
    pub lane_macs: u64,
    pub contention_stalls: u64,
    pub branch_penalty_cycles: u64,
    pub barrier_cycles: u64,
    pub mem_requests: u64,
    /// Requests that lost arbitration at least once.
    pub contention_events: u64,
}

impl CycleReport {
    /// MAC-class instructions over all retired instructions.
    pub fn opef(&self) -> f64 {
        self.simd_macs as f64 / self.retired.max(1) as f64
    }

    pub fn cycles_per_mac(&self) -> f64 {
        self.cycles as f64 / self.simd_macs.max(1) as f64
    }

    /// Sum of counters, with `cycles` the maximum (cores run concurrently).
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a CycleReport>) -> CycleReport {
        let mut out = CycleReport::default();
        for r in reports {
            out.cycles = out.cycles.max(r.cycles);
            out.retired += r.retired;
            out.classes.add(&r.classes);
            out.simd_macs += r.simd_macs;
            out.lane_macs += r.lane_macs;
            out.contention_stalls += r.contention_stalls;
            out.branch_penalty_cycles += r.branch_penalty_cycles;
            out.barrier_cycles += r.barrier_cycles;
            out.mem_requests += r.mem_requests;
            out.contention_events += r.contention_events;
        }
        out
    }
}

/// Per-instruction-address execution statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PcStat {
    pub retired: u64,
    /// Cycles attributed to this address, including stalls it caused.
    pub cycles: u64,
    pub mac_retired: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HwLoop {
    pub start: u32,
    pub end: u32,
    pub count: u32,
}

/// Reason a core spends a cycle without retiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Idle {
    Contention,
    BranchPenalty,
    Barrier,
}

/// Notable side effect of an executed instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    None,
    Barrier,
    Halt,
}

pub struct Core {
    id: usize,
    pc: u32,
    regs: [u32; 32],
    nn: [u32; 6],
    loops: [HwLoop; 2],
    halted: bool,
    penalty: u32,
    last_pc: u32,
    stalled: bool,
    timing: bool,
    report: CycleReport,
    profile: Vec<PcStat>,
    program: Arc<Program>,
    trace: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Core {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Core")
            .field("id", &self.id)
            .field("pc", &format_args!("{:#010x}", self.pc))
            .field("halted", &self.halted)
            .field("report", &self.report)
            .finish_non_exhaustive()
    }
}

impl Core {
    pub fn new(id: usize, program: Arc<Program>) -> Self {
        let pc = program.entry();
        let profile = vec![PcStat::default(); program.len()];
        Core {
            id,
            pc,
            regs: [0; 32],
            nn: [0; 6],
            loops: [HwLoop::default(); 2],
            halted: false,
            penalty: 0,
            last_pc: pc,
            stalled: false,
            timing: true,
            report: CycleReport::default(),
            profile,
            program,
            trace: None,
        }
    }

    /// With timing disabled, jumps and taken branches cost no extra cycles.
    pub fn set_timing(&mut self, enabled: bool) {
        self.timing = enabled;
    }

    pub fn set_trace(&mut self, sink: Box<dyn Write + Send>) {
        self.trace = Some(sink);
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn pc(&self) -> u32 {
        self.pc
    }

    pub fn reg(&self, r: u8) -> u32 {
        self.regs[r as usize]
    }

    pub fn set_reg(&mut self, r: u8, v: u32) {
        if r != 0 {
            self.regs[r as usize] = v;
        }
    }

    pub fn regs(&self) -> &[u32; 32] {
        &self.regs
    }

    /// NN-RF contents: `w0..w3` then `a0, a1`.
    pub fn nn_regs(&self) -> &[u32; 6] {
        &self.nn
    }

    pub fn hw_loops(&self) -> &[HwLoop; 2] {
        &self.loops
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn report(&self) -> &CycleReport {
        &self.report
    }

    pub fn profile(&self) -> &[PcStat] {
        &self.profile
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    /// True while paying a branch penalty.
    pub fn in_penalty(&self) -> bool {
        self.penalty > 0
    }

    fn trap(&self, cause: impl Into<TrapCause>) -> SimError {
        SimError::Trap { core: self.id, pc: self.pc, cycle: self.report.cycles, cause: cause.into() }
    }

    /// The memory access the next instruction will make, if any.
    pub fn next_access(&self) -> Result<Option<Access>, SimError> {
        let instr = self.program.fetch(self.pc).map_err(|c| self.trap(c))?;
        let r = |i: u8| self.regs[i as usize];
        let access = match instr {
            Instruction::Load { rs1, offset, .. } => Some(Access { addr: r(rs1).wrapping_add(offset as u32), store: false }),
            Instruction::Store { rs1, offset, .. } => Some(Access { addr: r(rs1).wrapping_add(offset as u32), store: true }),
            Instruction::LoadPost { rs1, .. } | Instruction::NnLoad { rs1, .. } | Instruction::ComputeUpdate { rs1, .. } => {
                Some(Access { addr: r(rs1), store: false })
            }
            Instruction::StorePost { rs1, .. } => Some(Access { addr: r(rs1), store: true }),
            Instruction::NnSdotp { rs1, imm, .. } if imm.update().is_some() => Some(Access { addr: r(rs1), store: false }),
            _ => None,
        };
        Ok(access)
    }

    /// Spends one cycle without retiring.
    pub fn idle(&mut self, why: Idle) {
        self.report.cycles += 1;
        let pc = match why {
            Idle::Contention => {
                self.report.contention_stalls += 1;
                if !self.stalled {
                    self.stalled = true;
                    self.report.contention_events += 1;
                }
                self.pc
            }
            Idle::BranchPenalty => {
                self.report.branch_penalty_cycles += 1;
                self.penalty = self.penalty.saturating_sub(1);
                self.last_pc
            }
            Idle::Barrier => {
                self.report.barrier_cycles += 1;
                self.last_pc
            }
        };
        if let Some(i) = self.program.index_of(pc) {
            self.profile[i].cycles += 1;
        }
    }

    /// One cycle against a memory port: pays pending penalties, requests
    /// memory and executes when granted. A barrier behaves as a one-core
    /// barrier and releases on the next cycle.
    pub fn step<M: MemoryPort + ?Sized>(&mut self, mem: &mut M) -> Result<Event, SimError> {
        if self.halted {
            return Ok(Event::Halt);
        }
        if self.penalty > 0 {
            self.idle(Idle::BranchPenalty);
            return Ok(Event::None);
        }
        if let Some(access) = self.next_access()? {
            if !mem.request(self.id, access) {
                self.idle(Idle::Contention);
                return Ok(Event::None);
            }
        }
        self.execute(mem)
    }

    /// Executes the instruction at `pc` in one cycle (memory already granted).
    pub fn execute<M: DataMemory + ?Sized>(&mut self, mem: &mut M) -> Result<Event, SimError> {
        let pc = self.pc;
        let instr = self.program.fetch(pc).map_err(|c| self.trap(c))?;
        let before = self.trace.as_ref().map(|_| (self.regs, self.nn));
        let idx = self.program.index_of(pc).expect("fetched pc is in range");

        let mut next = pc.wrapping_add(4);
        let mut jumped = false;
        let mut event = Event::None;
        let mut accessed = false;

        macro_rules! r {
            ($i:expr) => {
                self.regs[$i as usize]
            };
        }
        macro_rules! w {
            ($i:expr, $v:expr) => {{
                let v = $v;
                if $i != 0 {
                    self.regs[$i as usize] = v;
                }
            }};
        }
        macro_rules! load {
            ($addr:expr, $size:expr) => {{
                accessed = true;
                mem.load($addr, $size).map_err(|f| self.trap(f))?
            }};
        }

        match instr {
            Instruction::Lui { rd, imm } => w!(rd, imm << 12),
            Instruction::Auipc { rd, imm } => w!(rd, pc.wrapping_add(imm << 12)),
            Instruction::Jal { rd, offset } => {
                w!(rd, pc.wrapping_add(4));
                next = pc.wrapping_add(offset as u32);
                jumped = true;
            }
            Instruction::Jalr { rd, rs1, offset } => {
                let target = r!(rs1).wrapping_add(offset as u32) & !1;
                w!(rd, pc.wrapping_add(4));
                next = target;
                jumped = true;
            }
            Instruction::Branch { cond, rs1, rs2, offset } => {
                if branch_taken(cond, r!(rs1), r!(rs2)) {
                    next = pc.wrapping_add(offset as u32);
                    jumped = true;
                }
            }
            Instruction::Load { width, rd, rs1, offset } => {
                let addr = r!(rs1).wrapping_add(offset as u32);
                let raw = load!(addr, width.bytes());
                w!(rd, extend_load(width, raw));
            }
            Instruction::Store { width, rs1, rs2, offset } => {
                let addr = r!(rs1).wrapping_add(offset as u32);
                accessed = true;
                mem.store(addr, store_bytes(width), r!(rs2)).map_err(|f| self.trap(f))?;
            }
            Instruction::OpImm { op, rd, rs1, imm } => w!(rd, alu_imm(op, r!(rs1), imm)),
            Instruction::Op { op, rd, rs1, rs2 } => w!(rd, alu_reg(op, r!(rs1), r!(rs2), r!(rd))),
            Instruction::LoadPost { rd, rs1, offset } => {
                let addr = r!(rs1);
                let v = load!(addr, 4);
                w!(rs1, addr.wrapping_add(offset as u32));
                w!(rd, v);
            }
            Instruction::StorePost { rs1, rs2, offset } => {
                let addr = r!(rs1);
                accessed = true;
                mem.store(addr, 4, r!(rs2)).map_err(|f| self.trap(f))?;
                w!(rs1, addr.wrapping_add(offset as u32));
            }
            Instruction::Extract { signed, rd, rs1, len, pos } => {
                let field = (r!(rs1) >> pos) & mask(len as u32);
                let v = if signed && len < 32 {
                    (((field << (32 - len)) as i32) >> (32 - len)) as u32
                } else {
                    field
                };
                w!(rd, v);
            }
            Instruction::Insert { rd, rs1, len, pos } => {
                let m = mask(len as u32) << pos;
                w!(rd, (r!(rd) & !m) | ((r!(rs1) << pos) & m));
            }
            Instruction::HwLoop { level, op } => {
                let l = &mut self.loops[level as usize];
                match op {
                    LoopOp::Starti { offset } => l.start = pc.wrapping_add(4 * offset as u32),
                    LoopOp::Endi { offset } => l.end = pc.wrapping_add(4 * offset as u32),
                    LoopOp::Count { rs1 } => l.count = self.regs[rs1 as usize],
                    LoopOp::Counti { count } => l.count = count as u32,
                    LoopOp::Setup { rs1, offset } => {
                        l.start = pc.wrapping_add(4);
                        l.end = pc.wrapping_add(4 * offset as u32);
                        l.count = self.regs[rs1 as usize];
                    }
                    LoopOp::Setupi { count, offset } => {
                        l.start = pc.wrapping_add(4);
                        l.end = pc.wrapping_add(4 * offset as u32);
                        l.count = count as u32;
                    }
                }
            }
            Instruction::Dot { fmt, sign, accumulate, scalar, rd, rs1, rs2 } => {
                let b = if scalar { simd::splat_lane0(r!(rs2), fmt) } else { r!(rs2) };
                let acc = if accumulate { r!(rd) as i32 } else { 0 };
                w!(rd, simd::sdotp(r!(rs1), b, acc, fmt, sign) as u32);
            }
            Instruction::VecAlu { op, fmt, scalar, rd, rs1, rs2 } => {
                w!(rd, simd::vec_alu(op, r!(rs1), r!(rs2), fmt, scalar));
            }
            Instruction::ComputeUpdate { fmt, sign, nn, rd, rs1, rs2 } => {
                let acc = simd::sdotp(r!(rs2), self.nn[nn as usize], r!(rd) as i32, fmt, sign);
                let addr = r!(rs1);
                self.nn[nn as usize] = load!(addr, 4);
                w!(rs1, addr.wrapping_add(4));
                w!(rd, acc as u32);
            }
            Instruction::NnSdotp { fmt, sign, rd, rs1, imm } => {
                let (a, wt) = (4 + imm.act() as usize, imm.weight() as usize);
                let acc = simd::sdotp(self.nn[a], self.nn[wt], r!(rd) as i32, fmt, sign);
                if let Some(upd) = imm.update() {
                    let addr = r!(rs1);
                    let v = load!(addr, 4);
                    match upd {
                        NnUpdate::Act => self.nn[a] = v,
                        NnUpdate::Weight => self.nn[wt] = v,
                    }
                    w!(rs1, addr.wrapping_add(4));
                }
                w!(rd, acc as u32);
            }
            Instruction::NnLoad { dst, rs1, offset } => {
                let addr = r!(rs1);
                self.nn[dst.index() as usize] = load!(addr, 4);
                w!(rs1, addr.wrapping_add(offset as u32));
            }
            Instruction::Barrier => event = Event::Barrier,
            Instruction::Halt => {
                event = Event::Halt;
                self.halted = true;
                next = pc;
            }
        }

        if !jumped && event != Event::Halt {
            next = self.loop_redirect(next);
        }
        if jumped && self.timing {
            self.penalty = BRANCH_PENALTY;
        }

        let class = instr.class();
        let lanes = instr.mac_lanes();
        let rep = &mut self.report;
        rep.cycles += 1;
        rep.retired += 1;
        *rep.classes.slot(class) += 1;
        if class.is_mac() {
            rep.simd_macs += 1;
            rep.lane_macs += lanes as u64;
        }
        if accessed {
            rep.mem_requests += 1;
        }
        let stat = &mut self.profile[idx];
        stat.retired += 1;
        stat.cycles += 1;
        if class.is_mac() {
            stat.mac_retired += 1;
        }
        self.stalled = false;
        self.last_pc = pc;
        self.pc = next;

        if let Some((regs, nn)) = before {
            self.write_trace(pc, &instr, &regs, &nn);
        }
        Ok(event)
    }

    fn loop_redirect(&mut self, next: u32) -> u32 {
        for l in self.loops.iter_mut() {
            if l.count > 0 && next == l.end {
                if l.count > 1 {
                    l.count -= 1;
                    return l.start;
                }
                l.count = 0;
            }
        }
        next
    }

    fn write_trace(&mut self, pc: u32, instr: &Instruction, regs: &[u32; 32], nn: &[u32; 6]) {
        let mut writes = String::new();
        for (i, (old, new)) in regs.iter().zip(self.regs.iter()).enumerate() {
            if old != new {
                writes.push_str(&format!(" x{i}={new:#010x}"));
            }
        }
        for (i, (old, new)) in nn.iter().zip(self.nn.iter()).enumerate() {
            if old != new {
                let name = crate::isa::NnReg::from_index(i as u8).expect("nn index").name();
                writes.push_str(&format!(" {name}={new:#010x}"));
            }
        }
        let line = format!("{:>10} {:08x} {:<40}{}", self.report.cycles, pc, format_instruction(instr, pc), writes);
        if let Some(t) = self.trace.as_mut() {
            // trace output is best effort
            let _ = writeln!(t, "{}", line.trim_end());
        }
    }
}

#[inline]
fn branch_taken(cond: BranchCond, a: u32, b: u32) -> bool {
    cond.taken(a, b)
}

#[inline]
fn mask(len: u32) -> u32 {
    if len >= 32 {
        u32::MAX
    } else {
        (1 << len) - 1
    }
}

fn extend_load(width: LoadWidth, raw: u32) -> u32 {
    match width {
        LoadWidth::B => raw as u8 as i8 as i32 as u32,
        LoadWidth::H => raw as u16 as i16 as i32 as u32,
        LoadWidth::W | LoadWidth::Bu | LoadWidth::Hu => raw,
    }
}

fn store_bytes(width: StoreWidth) -> u32 {
    width.bytes()
}

fn alu_imm(op: ImmOp, a: u32, imm: i32) -> u32 {
    let b = imm as u32;
    match op {
        ImmOp::Addi => a.wrapping_add(b),
        ImmOp::Slti => ((a as i32) < imm) as u32,
        ImmOp::Sltiu => (a < b) as u32,
        ImmOp::Xori => a ^ b,
        ImmOp::Ori => a | b,
        ImmOp::Andi => a & b,
        ImmOp::Slli => a << (b & 31),
        ImmOp::Srli => a >> (b & 31),
        ImmOp::Srai => ((a as i32) >> (b & 31)) as u32,
    }
}

fn alu_reg(op: RegOp, a: u32, b: u32, d: u32) -> u32 {
    match op {
        RegOp::Add => a.wrapping_add(b),
        RegOp::Sub => a.wrapping_sub(b),
        RegOp::Sll => a << (b & 31),
        RegOp::Slt => ((a as i32) < (b as i32)) as u32,
        RegOp::Sltu => (a < b) as u32,
        RegOp::Xor => a ^ b,
        RegOp::Srl => a >> (b & 31),
        RegOp::Sra => ((a as i32) >> (b & 31)) as u32,
        RegOp::Or => a | b,
        RegOp::And => a & b,
        RegOp::Mul => a.wrapping_mul(b),
        RegOp::Mulh => ((a as i32 as i64 * b as i32 as i64) >> 32) as u32,
        RegOp::Mulhsu => ((a as i32 as i64 * b as u64 as i64) >> 32) as u32,
        RegOp::Mulhu => ((a as u64 * b as u64) >> 32) as u32,
        RegOp::Mac => d.wrapping_add(a.wrapping_mul(b)),
        RegOp::Min => (a as i32).min(b as i32) as u32,
        RegOp::Minu => a.min(b),
        RegOp::Max => (a as i32).max(b as i32) as u32,
        RegOp::Maxu => a.max(b),
    }
}

/// Runs a core against a memory port until it halts.
pub fn run<M: MemoryPort + ?Sized>(core: &mut Core, mem: &mut M, max_cycles: u64) -> Result<CycleReport, SimError> {
    while !core.halted() {
        if core.report().cycles >= max_cycles {
            return Err(SimError::MaxCyclesExceeded(max_cycles));
        }
        core.step(mem)?;
    }
    Ok(*core.report())
}

/// Sums per-address statistics over `[start, end)`.
pub fn profile_range(core: &Core, start: u32, end: u32) -> PcStat {
    let prog = core.program();
    let mut out = PcStat::default();
    for (i, s) in core.profile().iter().enumerate() {
        let pc = prog.base() + 4 * i as u32;
        if pc >= start && pc < end {
            out.retired += s.retired;
            out.cycles += s.cycles;
            out.mac_retired += s.mac_retired;
        }
    }
    out
}
