//! Decoded instruction forms, the 32-bit binary codec and instruction
//! classification for the simulated ISA: an RV32IM subset, the XpulpV2
//! pieces the kernels rely on (post-increment memory ops, hardware loops,
//! bit manipulation, 16/8-bit dot products) and the XpulpNN extension
//! (nibble/crumb SIMD, Compute&Update, nn_sdotp, NN-RF loads).
//!
//! The opcode map is an artifact convention; `encoding_reference` renders it
//! as the document the assembler and disassembler are held to.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const OPC_LOAD: u32 = 0x03;
pub const OPC_CUSTOM0: u32 = 0x0B;
pub const OPC_OP_IMM: u32 = 0x13;
pub const OPC_AUIPC: u32 = 0x17;
pub const OPC_STORE: u32 = 0x23;
pub const OPC_OP: u32 = 0x33;
pub const OPC_LUI: u32 = 0x37;
pub const OPC_PV: u32 = 0x57;
pub const OPC_XPULPNN: u32 = 0x5B;
pub const OPC_BRANCH: u32 = 0x63;
pub const OPC_JALR: u32 = 0x67;
pub const OPC_JAL: u32 = 0x6F;
pub const OPC_SYSTEM: u32 = 0x73;
pub const OPC_HWLOOP: u32 = 0x7B;

/// `ebreak` is repurposed as the simulator halt.
pub const HALT_WORD: u32 = 0x0010_0073;
pub const BARRIER_WORD: u32 = 0x0000_700B;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("illegal instruction word {0:#010x}")]
    IllegalInstruction(u32),
    #[error("illegal operand in {word:#010x}: {reason}")]
    IllegalOperand { word: u32, reason: &'static str },
    #[error("unencodable instruction {0}")]
    Unencodable(String),
}

/// SIMD lane interpretation of a 32-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SimdFormat {
    /// 2 × 16-bit halfwords.
    H,
    /// 4 × 8-bit bytes.
    B,
    /// 8 × 4-bit nibbles.
    N,
    /// 16 × 2-bit crumbs.
    C,
}

impl SimdFormat {
    pub const ALL: [SimdFormat; 4] = [SimdFormat::H, SimdFormat::B, SimdFormat::N, SimdFormat::C];

    pub const fn lane_bits(self) -> u32 {
        match self {
            SimdFormat::H => 16,
            SimdFormat::B => 8,
            SimdFormat::N => 4,
            SimdFormat::C => 2,
        }
    }

    pub const fn lane_count(self) -> u32 {
        32 / self.lane_bits()
    }

    pub const fn suffix(self) -> &'static str {
        match self {
            SimdFormat::H => "h",
            SimdFormat::B => "b",
            SimdFormat::N => "n",
            SimdFormat::C => "c",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.suffix() == s)
    }

    /// Format whose lanes are `bits` wide.
    pub fn for_bits(bits: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.lane_bits() == bits)
    }

    const fn code(self) -> u32 {
        match self {
            SimdFormat::H => 0,
            SimdFormat::B => 1,
            SimdFormat::N => 2,
            SimdFormat::C => 3,
        }
    }

    const fn from_code(code: u32) -> Self {
        match code & 3 {
            0 => SimdFormat::H,
            1 => SimdFormat::B,
            2 => SimdFormat::N,
            _ => SimdFormat::C,
        }
    }
}

/// Operand signedness of a dot product.
///
/// `Usp` reads the first operand as unsigned and the second as signed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signedness {
    Up,
    Usp,
    Sp,
}

impl Signedness {
    pub const ALL: [Signedness; 3] = [Signedness::Up, Signedness::Usp, Signedness::Sp];

    pub const fn first_signed(self) -> bool {
        matches!(self, Signedness::Sp)
    }

    pub const fn second_signed(self) -> bool {
        matches!(self, Signedness::Usp | Signedness::Sp)
    }

    pub const fn suffix(self) -> &'static str {
        match self {
            Signedness::Up => "up",
            Signedness::Usp => "usp",
            Signedness::Sp => "sp",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.suffix() == s)
    }

    const fn code(self) -> u32 {
        match self {
            Signedness::Up => 0,
            Signedness::Usp => 1,
            Signedness::Sp => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchCond {
    Eq,
    Ne,
    Lt,
    Ge,
    Ltu,
    Geu,
}

impl BranchCond {
    pub const ALL: [BranchCond; 6] = [
        BranchCond::Eq,
        BranchCond::Ne,
        BranchCond::Lt,
        BranchCond::Ge,
        BranchCond::Ltu,
        BranchCond::Geu,
    ];

    const fn funct3(self) -> u32 {
        match self {
            BranchCond::Eq => 0,
            BranchCond::Ne => 1,
            BranchCond::Lt => 4,
            BranchCond::Ge => 5,
            BranchCond::Ltu => 6,
            BranchCond::Geu => 7,
        }
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            BranchCond::Eq => "beq",
            BranchCond::Ne => "bne",
            BranchCond::Lt => "blt",
            BranchCond::Ge => "bge",
            BranchCond::Ltu => "bltu",
            BranchCond::Geu => "bgeu",
        }
    }

    pub fn taken(self, a: u32, b: u32) -> bool {
        match self {
            BranchCond::Eq => a == b,
            BranchCond::Ne => a != b,
            BranchCond::Lt => (a as i32) < (b as i32),
            BranchCond::Ge => (a as i32) >= (b as i32),
            BranchCond::Ltu => a < b,
            BranchCond::Geu => a >= b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoadWidth {
    B,
    H,
    W,
    Bu,
    Hu,
}

impl LoadWidth {
    pub const ALL: [LoadWidth; 5] = [LoadWidth::B, LoadWidth::H, LoadWidth::W, LoadWidth::Bu, LoadWidth::Hu];

    const fn funct3(self) -> u32 {
        match self {
            LoadWidth::B => 0,
            LoadWidth::H => 1,
            LoadWidth::W => 2,
            LoadWidth::Bu => 4,
            LoadWidth::Hu => 5,
        }
    }

    pub const fn bytes(self) -> u32 {
        match self {
            LoadWidth::B | LoadWidth::Bu => 1,
            LoadWidth::H | LoadWidth::Hu => 2,
            LoadWidth::W => 4,
        }
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            LoadWidth::B => "lb",
            LoadWidth::H => "lh",
            LoadWidth::W => "lw",
            LoadWidth::Bu => "lbu",
            LoadWidth::Hu => "lhu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreWidth {
    B,
    H,
    W,
}

impl StoreWidth {
    pub const ALL: [StoreWidth; 3] = [StoreWidth::B, StoreWidth::H, StoreWidth::W];

    const fn funct3(self) -> u32 {
        match self {
            StoreWidth::B => 0,
            StoreWidth::H => 1,
            StoreWidth::W => 2,
        }
    }

    pub const fn bytes(self) -> u32 {
        1 << self.funct3()
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            StoreWidth::B => "sb",
            StoreWidth::H => "sh",
            StoreWidth::W => "sw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImmOp {
    Addi,
    Slti,
    Sltiu,
    Xori,
    Ori,
    Andi,
    Slli,
    Srli,
    Srai,
}

impl ImmOp {
    pub const ALL: [ImmOp; 9] = [
        ImmOp::Addi,
        ImmOp::Slti,
        ImmOp::Sltiu,
        ImmOp::Xori,
        ImmOp::Ori,
        ImmOp::Andi,
        ImmOp::Slli,
        ImmOp::Srli,
        ImmOp::Srai,
    ];

    pub const fn is_shift(self) -> bool {
        matches!(self, ImmOp::Slli | ImmOp::Srli | ImmOp::Srai)
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            ImmOp::Addi => "addi",
            ImmOp::Slti => "slti",
            ImmOp::Sltiu => "sltiu",
            ImmOp::Xori => "xori",
            ImmOp::Ori => "ori",
            ImmOp::Andi => "andi",
            ImmOp::Slli => "slli",
            ImmOp::Srli => "srli",
            ImmOp::Srai => "srai",
        }
    }
}

/// Register-register scalar operations: RV32I/M plus the XpulpV2 scalar
/// `p.mac` and min/max family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegOp {
    Add,
    Sub,
    Sll,
    Slt,
    Sltu,
    Xor,
    Srl,
    Sra,
    Or,
    And,
    Mul,
    Mulh,
    Mulhsu,
    Mulhu,
    Mac,
    Min,
    Minu,
    Max,
    Maxu,
}

impl RegOp {
    pub const ALL: [RegOp; 19] = [
        RegOp::Add,
        RegOp::Sub,
        RegOp::Sll,
        RegOp::Slt,
        RegOp::Sltu,
        RegOp::Xor,
        RegOp::Srl,
        RegOp::Sra,
        RegOp::Or,
        RegOp::And,
        RegOp::Mul,
        RegOp::Mulh,
        RegOp::Mulhsu,
        RegOp::Mulhu,
        RegOp::Mac,
        RegOp::Min,
        RegOp::Minu,
        RegOp::Max,
        RegOp::Maxu,
    ];

    /// (funct7, funct3)
    const fn functs(self) -> (u32, u32) {
        match self {
            RegOp::Add => (0x00, 0),
            RegOp::Sub => (0x20, 0),
            RegOp::Sll => (0x00, 1),
            RegOp::Slt => (0x00, 2),
            RegOp::Sltu => (0x00, 3),
            RegOp::Xor => (0x00, 4),
            RegOp::Srl => (0x00, 5),
            RegOp::Sra => (0x20, 5),
            RegOp::Or => (0x00, 6),
            RegOp::And => (0x00, 7),
            RegOp::Mul => (0x01, 0),
            RegOp::Mulh => (0x01, 1),
            RegOp::Mulhsu => (0x01, 2),
            RegOp::Mulhu => (0x01, 3),
            RegOp::Mac => (0x21, 0),
            RegOp::Min => (0x02, 4),
            RegOp::Minu => (0x02, 5),
            RegOp::Max => (0x02, 6),
            RegOp::Maxu => (0x02, 7),
        }
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            RegOp::Add => "add",
            RegOp::Sub => "sub",
            RegOp::Sll => "sll",
            RegOp::Slt => "slt",
            RegOp::Sltu => "sltu",
            RegOp::Xor => "xor",
            RegOp::Srl => "srl",
            RegOp::Sra => "sra",
            RegOp::Or => "or",
            RegOp::And => "and",
            RegOp::Mul => "mul",
            RegOp::Mulh => "mulh",
            RegOp::Mulhsu => "mulhsu",
            RegOp::Mulhu => "mulhu",
            RegOp::Mac => "p.mac",
            RegOp::Min => "p.min",
            RegOp::Minu => "p.minu",
            RegOp::Max => "p.max",
            RegOp::Maxu => "p.maxu",
        }
    }
}

/// Lane-wise vector ALU operations of the nibble/crumb family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VecOp {
    Add,
    Sub,
    Avg,
    Avgu,
    Max,
    Maxu,
    Min,
    Minu,
    Srl,
    Sra,
    Sll,
    Abs,
}

impl VecOp {
    pub const ALL: [VecOp; 12] = [
        VecOp::Add,
        VecOp::Sub,
        VecOp::Avg,
        VecOp::Avgu,
        VecOp::Max,
        VecOp::Maxu,
        VecOp::Min,
        VecOp::Minu,
        VecOp::Srl,
        VecOp::Sra,
        VecOp::Sll,
        VecOp::Abs,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            VecOp::Add => "add",
            VecOp::Sub => "sub",
            VecOp::Avg => "avg",
            VecOp::Avgu => "avgu",
            VecOp::Max => "max",
            VecOp::Maxu => "maxu",
            VecOp::Min => "min",
            VecOp::Minu => "minu",
            VecOp::Srl => "srl",
            VecOp::Sra => "sra",
            VecOp::Sll => "sll",
            VecOp::Abs => "abs",
        }
    }

    const fn code(self) -> u32 {
        self as u32
    }
}

/// Hardware loop configuration instructions. Offsets are in instruction
/// words relative to the instruction itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoopOp {
    Starti { offset: u16 },
    Endi { offset: u16 },
    Count { rs1: u8 },
    Counti { count: u16 },
    Setup { rs1: u8, offset: u16 },
    Setupi { count: u16, offset: u16 },
}

pub const LOOP_IMM_MAX: u16 = 0xFFF;
pub const SETUPI_OFFSET_MAX: u16 = 0x1FF;

/// One of the six NN-RF registers: weights `w0..w3` (index 0–3) and
/// activations `a0..a1` (index 4–5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NnReg(u8);

impl NnReg {
    pub const fn weight(i: u8) -> Option<Self> {
        if i < 4 {
            Some(NnReg(i))
        } else {
            None
        }
    }

    pub const fn act(i: u8) -> Option<Self> {
        if i < 2 {
            Some(NnReg(4 + i))
        } else {
            None
        }
    }

    pub const fn index(self) -> u8 {
        self.0
    }

    pub const fn from_index(i: u8) -> Option<Self> {
        if i < 6 {
            Some(NnReg(i))
        } else {
            None
        }
    }

    pub fn name(self) -> String {
        if self.0 < 4 {
            format!("w{}", self.0)
        } else {
            format!("a{}", self.0 - 4)
        }
    }
}

/// The 5-bit nn_sdotp immediate: bit 0 selects the activation register,
/// bits 1–2 the weight register, bit 3 requests an activation update and
/// bit 4 a weight update. The two update bits are mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NnImm(u8);

impl NnImm {
    pub const fn new(bits: u8) -> Option<Self> {
        if bits > 0x1F || (bits & 0x18) == 0x18 {
            None
        } else {
            Some(NnImm(bits))
        }
    }

    pub fn from_parts(act: u8, weight: u8, update: Option<NnUpdate>) -> Option<Self> {
        if act > 1 || weight > 3 {
            return None;
        }
        let upd = match update {
            None => 0,
            Some(NnUpdate::Act) => 1 << 3,
            Some(NnUpdate::Weight) => 1 << 4,
        };
        NnImm::new(act | (weight << 1) | upd)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn act(self) -> u8 {
        self.0 & 1
    }

    pub const fn weight(self) -> u8 {
        (self.0 >> 1) & 3
    }

    pub const fn update(self) -> Option<NnUpdate> {
        if self.0 & 0x08 != 0 {
            Some(NnUpdate::Act)
        } else if self.0 & 0x10 != 0 {
            Some(NnUpdate::Weight)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NnUpdate {
    Act,
    Weight,
}

/// A decoded instruction. Register fields are GP-RF indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Lui { rd: u8, imm: u32 },
    Auipc { rd: u8, imm: u32 },
    Jal { rd: u8, offset: i32 },
    Jalr { rd: u8, rs1: u8, offset: i32 },
    Branch { cond: BranchCond, rs1: u8, rs2: u8, offset: i32 },
    Load { width: LoadWidth, rd: u8, rs1: u8, offset: i32 },
    Store { width: StoreWidth, rs1: u8, rs2: u8, offset: i32 },
    OpImm { op: ImmOp, rd: u8, rs1: u8, imm: i32 },
    Op { op: RegOp, rd: u8, rs1: u8, rs2: u8 },
    /// `p.lw rd, offset(rs1!)`
    LoadPost { rd: u8, rs1: u8, offset: i32 },
    /// `p.sw rs2, offset(rs1!)`
    StorePost { rs1: u8, rs2: u8, offset: i32 },
    /// `p.extract[u] rd, rs1, len, pos`
    Extract { signed: bool, rd: u8, rs1: u8, len: u8, pos: u8 },
    /// `p.insert rd, rs1, len, pos`
    Insert { rd: u8, rs1: u8, len: u8, pos: u8 },
    HwLoop { level: u8, op: LoopOp },
    /// Plain SIMD dot product (`pv.[s]dot*`), any format.
    Dot { fmt: SimdFormat, sign: Signedness, accumulate: bool, scalar: bool, rd: u8, rs1: u8, rs2: u8 },
    /// Nibble/crumb vector ALU operation.
    VecAlu { op: VecOp, fmt: SimdFormat, scalar: bool, rd: u8, rs1: u8, rs2: u8 },
    /// Compute&Update: sdotp against NN-RF weight `nn`, then reload it from
    /// `rs1` and post-increment `rs1` by one word.
    ComputeUpdate { fmt: SimdFormat, sign: Signedness, nn: u8, rd: u8, rs1: u8, rs2: u8 },
    /// nn_sdotp: both operands from the NN-RF, optional update from `rs1`.
    NnSdotp { fmt: SimdFormat, sign: Signedness, rd: u8, rs1: u8, imm: NnImm },
    /// Load one word into an NN-RF register with post-increment.
    NnLoad { dst: NnReg, rs1: u8, offset: i32 },
    Barrier,
    Halt,
}

/// Coarse instruction classes used for OPEF and cycle accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstructionClass {
    SimdMac,
    Load,
    Store,
    MacLoad,
    AluScalar,
    SimdAlu,
    ControlFlow,
    Other,
}

impl InstructionClass {
    pub const ALL: [InstructionClass; 8] = [
        InstructionClass::SimdMac,
        InstructionClass::Load,
        InstructionClass::Store,
        InstructionClass::MacLoad,
        InstructionClass::AluScalar,
        InstructionClass::SimdAlu,
        InstructionClass::ControlFlow,
        InstructionClass::Other,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn name(self) -> &'static str {
        match self {
            InstructionClass::SimdMac => "simd_mac",
            InstructionClass::Load => "load",
            InstructionClass::Store => "store",
            InstructionClass::MacLoad => "mac_load",
            InstructionClass::AluScalar => "alu_scalar",
            InstructionClass::SimdAlu => "simd_alu",
            InstructionClass::ControlFlow => "control_flow",
            InstructionClass::Other => "other",
        }
    }

    /// Classes that perform a SIMD multiply-accumulate.
    pub const fn is_mac(self) -> bool {
        matches!(self, InstructionClass::SimdMac | InstructionClass::MacLoad)
    }
}

impl fmt::Display for InstructionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn classify(instr: &Instruction) -> InstructionClass {
    use Instruction::*;
    match instr {
        Dot { .. } => InstructionClass::SimdMac,
        ComputeUpdate { .. } | NnSdotp { .. } => InstructionClass::MacLoad,
        Load { .. } | LoadPost { .. } | NnLoad { .. } => InstructionClass::Load,
        Store { .. } | StorePost { .. } => InstructionClass::Store,
        Lui { .. } | Auipc { .. } | OpImm { .. } | Op { .. } | Extract { .. } | Insert { .. } => {
            InstructionClass::AluScalar
        }
        VecAlu { .. } => InstructionClass::SimdAlu,
        Jal { .. } | Jalr { .. } | Branch { .. } | HwLoop { .. } => InstructionClass::ControlFlow,
        Barrier | Halt => InstructionClass::Other,
    }
}

impl Instruction {
    pub fn class(&self) -> InstructionClass {
        classify(self)
    }

    /// Number of SIMD lanes multiplied by a MAC-class instruction, 0 otherwise.
    pub fn mac_lanes(&self) -> u32 {
        match self {
            Instruction::Dot { fmt, .. }
            | Instruction::ComputeUpdate { fmt, .. }
            | Instruction::NnSdotp { fmt, .. } => fmt.lane_count(),
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// field helpers

const fn bits(word: u32, hi: u32, lo: u32) -> u32 {
    (word >> lo) & ((1u32 << (hi - lo + 1)) - 1)
}

fn sext(value: u32, width: u32) -> i32 {
    let shift = 32 - width;
    ((value << shift) as i32) >> shift
}

fn rd_of(word: u32) -> u8 {
    bits(word, 11, 7) as u8
}

fn rs1_of(word: u32) -> u8 {
    bits(word, 19, 15) as u8
}

fn rs2_of(word: u32) -> u8 {
    bits(word, 24, 20) as u8
}

fn funct3_of(word: u32) -> u32 {
    bits(word, 14, 12)
}

fn funct7_of(word: u32) -> u32 {
    bits(word, 31, 25)
}

fn imm_i(word: u32) -> i32 {
    (word as i32) >> 20
}

fn imm_s(word: u32) -> i32 {
    let raw = (bits(word, 31, 25) << 5) | bits(word, 11, 7);
    sext(raw, 12)
}

fn imm_b(word: u32) -> i32 {
    let raw = (bits(word, 31, 31) << 12)
        | (bits(word, 7, 7) << 11)
        | (bits(word, 30, 25) << 5)
        | (bits(word, 11, 8) << 1);
    sext(raw, 13)
}

fn imm_j(word: u32) -> i32 {
    let raw = (bits(word, 31, 31) << 20)
        | (bits(word, 19, 12) << 12)
        | (bits(word, 20, 20) << 11)
        | (bits(word, 30, 21) << 1);
    sext(raw, 21)
}

fn r_type(opcode: u32, funct7: u32, funct3: u32, rd: u8, rs1: u8, rs2: u8) -> u32 {
    (funct7 << 25) | ((rs2 as u32) << 20) | ((rs1 as u32) << 15) | (funct3 << 12) | ((rd as u32) << 7) | opcode
}

fn i_type(opcode: u32, funct3: u32, rd: u8, rs1: u8, imm: i32) -> u32 {
    (((imm as u32) & 0xFFF) << 20) | ((rs1 as u32) << 15) | (funct3 << 12) | ((rd as u32) << 7) | opcode
}

fn s_type(opcode: u32, funct3: u32, rs1: u8, rs2: u8, imm: i32) -> u32 {
    let v = imm as u32;
    (bits(v, 11, 5) << 25) | ((rs2 as u32) << 20) | ((rs1 as u32) << 15) | (funct3 << 12) | (bits(v, 4, 0) << 7) | opcode
}

fn b_type(funct3: u32, rs1: u8, rs2: u8, offset: i32) -> u32 {
    let v = offset as u32;
    (bits(v, 12, 12) << 31)
        | (bits(v, 10, 5) << 25)
        | ((rs2 as u32) << 20)
        | ((rs1 as u32) << 15)
        | (funct3 << 12)
        | (bits(v, 4, 1) << 8)
        | (bits(v, 11, 11) << 7)
        | OPC_BRANCH
}

fn j_type(rd: u8, offset: i32) -> u32 {
    let v = offset as u32;
    (bits(v, 20, 20) << 31)
        | (bits(v, 10, 1) << 21)
        | (bits(v, 11, 11) << 20)
        | (bits(v, 19, 12) << 12)
        | ((rd as u32) << 7)
        | OPC_JAL
}

fn fits_signed(v: i32, width: u32) -> bool {
    let min = -(1i64 << (width - 1));
    let max = (1i64 << (width - 1)) - 1;
    (min..=max).contains(&(v as i64))
}

// ---------------------------------------------------------------------------
// decode

fn illegal(word: u32) -> IsaError {
    IsaError::IllegalInstruction(word)
}

fn bad_operand(word: u32, reason: &'static str) -> IsaError {
    IsaError::IllegalOperand { word, reason }
}

/// Decode one 32-bit word.
pub fn decode(word: u32) -> Result<Instruction, IsaError> {
    let opcode = word & 0x7F;
    let rd = rd_of(word);
    let rs1 = rs1_of(word);
    let rs2 = rs2_of(word);
    let f3 = funct3_of(word);
    let f7 = funct7_of(word);
    use Instruction::*;
    let instr = match opcode {
        OPC_LUI => Lui { rd, imm: word >> 12 },
        OPC_AUIPC => Auipc { rd, imm: word >> 12 },
        OPC_JAL => Jal { rd, offset: imm_j(word) },
        OPC_JALR if f3 == 0 => Jalr { rd, rs1, offset: imm_i(word) },
        OPC_BRANCH => {
            let cond = BranchCond::ALL
                .into_iter()
                .find(|c| c.funct3() == f3)
                .ok_or_else(|| illegal(word))?;
            Branch { cond, rs1, rs2, offset: imm_b(word) }
        }
        OPC_LOAD => {
            let width = LoadWidth::ALL
                .into_iter()
                .find(|w| w.funct3() == f3)
                .ok_or_else(|| illegal(word))?;
            Load { width, rd, rs1, offset: imm_i(word) }
        }
        OPC_STORE => {
            let width = StoreWidth::ALL
                .into_iter()
                .find(|w| w.funct3() == f3)
                .ok_or_else(|| illegal(word))?;
            Store { width, rs1, rs2, offset: imm_s(word) }
        }
        OPC_OP_IMM => {
            let (op, imm) = match f3 {
                0 => (ImmOp::Addi, imm_i(word)),
                2 => (ImmOp::Slti, imm_i(word)),
                3 => (ImmOp::Sltiu, imm_i(word)),
                4 => (ImmOp::Xori, imm_i(word)),
                6 => (ImmOp::Ori, imm_i(word)),
                7 => (ImmOp::Andi, imm_i(word)),
                1 if f7 == 0 => (ImmOp::Slli, rs2 as i32),
                5 if f7 == 0 => (ImmOp::Srli, rs2 as i32),
                5 if f7 == 0x20 => (ImmOp::Srai, rs2 as i32),
                _ => return Err(illegal(word)),
            };
            OpImm { op, rd, rs1, imm }
        }
        OPC_OP => {
            let op = RegOp::ALL
                .into_iter()
                .find(|op| op.functs() == (f7, f3))
                .ok_or_else(|| illegal(word))?;
            Op { op, rd, rs1, rs2 }
        }
        OPC_SYSTEM if word == HALT_WORD => Halt,
        OPC_CUSTOM0 => decode_custom0(word)?,
        OPC_HWLOOP => decode_hwloop(word)?,
        OPC_PV => {
            if f3 != 0 {
                return Err(illegal(word));
            }
            let (kind, scalar, fmt_bit) = (f7 >> 2, (f7 >> 1) & 1 == 1, f7 & 1);
            if kind > 5 {
                return Err(illegal(word));
            }
            let fmt = if fmt_bit == 0 { SimdFormat::H } else { SimdFormat::B };
            let sign = Signedness::ALL[(kind % 3) as usize];
            Dot { fmt, sign, accumulate: kind >= 3, scalar, rd, rs1, rs2 }
        }
        OPC_XPULPNN => decode_xpulpnn(word)?,
        _ => return Err(illegal(word)),
    };
    Ok(instr)
}

fn decode_custom0(word: u32) -> Result<Instruction, IsaError> {
    let rd = rd_of(word);
    let rs1 = rs1_of(word);
    match funct3_of(word) {
        0 => {
            let kind = bits(word, 31, 30);
            let len = bits(word, 29, 25) as u8 + 1;
            let pos = bits(word, 24, 20) as u8;
            if pos as u32 + len as u32 > 32 {
                return Err(bad_operand(word, "bit field exceeds 32 bits"));
            }
            match kind {
                0 => Ok(Instruction::Extract { signed: true, rd, rs1, len, pos }),
                1 => Ok(Instruction::Extract { signed: false, rd, rs1, len, pos }),
                2 => Ok(Instruction::Insert { rd, rs1, len, pos }),
                _ => Err(illegal(word)),
            }
        }
        2 => Ok(Instruction::LoadPost { rd, rs1, offset: imm_i(word) }),
        6 => Ok(Instruction::StorePost { rs1, rs2: rs2_of(word), offset: imm_s(word) }),
        3 => {
            let dst = NnReg::from_index(rd).ok_or_else(|| bad_operand(word, "NN-RF index out of range"))?;
            Ok(Instruction::NnLoad { dst, rs1, offset: imm_i(word) })
        }
        7 if word == BARRIER_WORD => Ok(Instruction::Barrier),
        _ => Err(illegal(word)),
    }
}

fn decode_hwloop(word: u32) -> Result<Instruction, IsaError> {
    let level = bits(word, 7, 7) as u8;
    let hi4 = bits(word, 11, 8);
    let rs1 = rs1_of(word);
    let imm = bits(word, 31, 20) as u16;
    let f3 = funct3_of(word);
    if f3 != 5 && hi4 != 0 {
        return Err(illegal(word));
    }
    let op = match f3 {
        0 if rs1 == 0 => LoopOp::Starti { offset: imm },
        1 if rs1 == 0 => LoopOp::Endi { offset: imm },
        2 if imm == 0 => LoopOp::Count { rs1 },
        3 if rs1 == 0 => LoopOp::Counti { count: imm },
        4 => LoopOp::Setup { rs1, offset: imm },
        5 => LoopOp::Setupi { count: imm, offset: ((hi4 << 5) | rs1 as u32) as u16 },
        _ => return Err(illegal(word)),
    };
    Ok(Instruction::HwLoop { level, op })
}

fn decode_xpulpnn(word: u32) -> Result<Instruction, IsaError> {
    let rd = rd_of(word);
    let rs1 = rs1_of(word);
    let rs2 = rs2_of(word);
    let f7 = funct7_of(word);
    match funct3_of(word) {
        0 => {
            let (kind, scalar) = (f7 >> 2, (f7 >> 1) & 1 == 1);
            let fmt = if f7 & 1 == 0 { SimdFormat::N } else { SimdFormat::C };
            match kind {
                0..=11 => {
                    let op = VecOp::ALL[kind as usize];
                    if op == VecOp::Abs && (scalar || rs2 != 0) {
                        return Err(bad_operand(word, "abs takes a single source"));
                    }
                    Ok(Instruction::VecAlu { op, fmt, scalar, rd, rs1, rs2 })
                }
                12..=17 => {
                    let k = kind - 12;
                    let sign = Signedness::ALL[(k % 3) as usize];
                    Ok(Instruction::Dot { fmt, sign, accumulate: k >= 3, scalar, rd, rs1, rs2 })
                }
                _ => Err(illegal(word)),
            }
        }
        1 => {
            if f7 >> 6 != 0 {
                return Err(illegal(word));
            }
            let sign = Signedness::from_code(bits(f7, 5, 4)).ok_or_else(|| illegal(word))?;
            let fmt = SimdFormat::from_code(bits(f7, 3, 2));
            Ok(Instruction::ComputeUpdate { fmt, sign, nn: (f7 & 3) as u8, rd, rs1, rs2 })
        }
        2 => {
            if f7 >> 4 != 0 {
                return Err(illegal(word));
            }
            let sign = Signedness::from_code(bits(f7, 3, 2)).ok_or_else(|| illegal(word))?;
            let fmt = SimdFormat::from_code(f7 & 3);
            let imm = NnImm::new(rs2).ok_or_else(|| bad_operand(word, "nn_sdotp update bits are mutually exclusive"))?;
            Ok(Instruction::NnSdotp { fmt, sign, rd, rs1, imm })
        }
        _ => Err(illegal(word)),
    }
}

// ---------------------------------------------------------------------------
// encode

fn unencodable(instr: &Instruction, why: &str) -> IsaError {
    IsaError::Unencodable(format!("{instr:?}: {why}"))
}

/// Encode a well-formed instruction.
pub fn encode(instr: &Instruction) -> Result<u32, IsaError> {
    use Instruction::*;
    let check_regs = |regs: &[u8]| -> Result<(), IsaError> {
        if regs.iter().any(|&r| r >= 32) {
            Err(unencodable(instr, "register index out of range"))
        } else {
            Ok(())
        }
    };
    let check_imm12 = |v: i32| -> Result<(), IsaError> {
        if fits_signed(v, 12) {
            Ok(())
        } else {
            Err(unencodable(instr, "12-bit immediate out of range"))
        }
    };
    let word = match *instr {
        Lui { rd, imm } | Auipc { rd, imm } => {
            check_regs(&[rd])?;
            if imm >= 1 << 20 {
                return Err(unencodable(instr, "20-bit immediate out of range"));
            }
            let opc = if matches!(instr, Lui { .. }) { OPC_LUI } else { OPC_AUIPC };
            (imm << 12) | ((rd as u32) << 7) | opc
        }
        Jal { rd, offset } => {
            check_regs(&[rd])?;
            if offset & 1 != 0 || !fits_signed(offset, 21) {
                return Err(unencodable(instr, "jump offset out of range"));
            }
            j_type(rd, offset)
        }
        Jalr { rd, rs1, offset } => {
            check_regs(&[rd, rs1])?;
            check_imm12(offset)?;
            i_type(OPC_JALR, 0, rd, rs1, offset)
        }
        Branch { cond, rs1, rs2, offset } => {
            check_regs(&[rs1, rs2])?;
            if offset & 1 != 0 || !fits_signed(offset, 13) {
                return Err(unencodable(instr, "branch offset out of range"));
            }
            b_type(cond.funct3(), rs1, rs2, offset)
        }
        Load { width, rd, rs1, offset } => {
            check_regs(&[rd, rs1])?;
            check_imm12(offset)?;
            i_type(OPC_LOAD, width.funct3(), rd, rs1, offset)
        }
        Store { width, rs1, rs2, offset } => {
            check_regs(&[rs1, rs2])?;
            check_imm12(offset)?;
            s_type(OPC_STORE, width.funct3(), rs1, rs2, offset)
        }
        OpImm { op, rd, rs1, imm } => {
            check_regs(&[rd, rs1])?;
            let (f3, field) = match op {
                ImmOp::Addi => (0, imm),
                ImmOp::Slti => (2, imm),
                ImmOp::Sltiu => (3, imm),
                ImmOp::Xori => (4, imm),
                ImmOp::Ori => (6, imm),
                ImmOp::Andi => (7, imm),
                ImmOp::Slli | ImmOp::Srli | ImmOp::Srai => {
                    if !(0..32).contains(&imm) {
                        return Err(unencodable(instr, "shift amount out of range"));
                    }
                    match op {
                        ImmOp::Slli => (1, imm),
                        ImmOp::Srli => (5, imm),
                        _ => (5, imm | 0x400),
                    }
                }
            };
            if !op.is_shift() {
                check_imm12(field)?;
            }
            i_type(OPC_OP_IMM, f3, rd, rs1, field)
        }
        Op { op, rd, rs1, rs2 } => {
            check_regs(&[rd, rs1, rs2])?;
            let (f7, f3) = op.functs();
            r_type(OPC_OP, f7, f3, rd, rs1, rs2)
        }
        LoadPost { rd, rs1, offset } => {
            check_regs(&[rd, rs1])?;
            check_imm12(offset)?;
            i_type(OPC_CUSTOM0, 2, rd, rs1, offset)
        }
        StorePost { rs1, rs2, offset } => {
            check_regs(&[rs1, rs2])?;
            check_imm12(offset)?;
            s_type(OPC_CUSTOM0, 6, rs1, rs2, offset)
        }
        Extract { rd, rs1, len, pos, .. } | Insert { rd, rs1, len, pos } => {
            check_regs(&[rd, rs1])?;
            if len == 0 || len > 32 || pos >= 32 || pos as u32 + len as u32 > 32 {
                return Err(unencodable(instr, "bit field out of range"));
            }
            let kind: u32 = match instr {
                Insert { .. } => 2,
                Extract { signed: true, .. } => 0,
                _ => 1,
            };
            let imm = (kind << 10) | (((len - 1) as u32) << 5) | pos as u32;
            i_type(OPC_CUSTOM0, 0, rd, rs1, imm as i32)
        }
        HwLoop { level, op } => {
            if level > 1 {
                return Err(unencodable(instr, "hardware loop index must be 0 or 1"));
            }
            let l = (level as u32) << 7;
            let imm12 = |v: u16| -> Result<u32, IsaError> {
                if v > LOOP_IMM_MAX {
                    Err(unencodable(instr, "loop immediate exceeds 12 bits"))
                } else {
                    Ok((v as u32) << 20)
                }
            };
            match op {
                LoopOp::Starti { offset } => imm12(offset)? | l | OPC_HWLOOP,
                LoopOp::Endi { offset } => imm12(offset)? | (1 << 12) | l | OPC_HWLOOP,
                LoopOp::Count { rs1 } => {
                    check_regs(&[rs1])?;
                    ((rs1 as u32) << 15) | (2 << 12) | l | OPC_HWLOOP
                }
                LoopOp::Counti { count } => imm12(count)? | (3 << 12) | l | OPC_HWLOOP,
                LoopOp::Setup { rs1, offset } => {
                    check_regs(&[rs1])?;
                    imm12(offset)? | ((rs1 as u32) << 15) | (4 << 12) | l | OPC_HWLOOP
                }
                LoopOp::Setupi { count, offset } => {
                    if offset > SETUPI_OFFSET_MAX {
                        return Err(unencodable(instr, "lp.setupi end offset exceeds 9 bits"));
                    }
                    let off = offset as u32;
                    imm12(count)? | ((off & 0x1F) << 15) | (5 << 12) | ((off >> 5) << 8) | l | OPC_HWLOOP
                }
            }
        }
        Dot { fmt, sign, accumulate, scalar, rd, rs1, rs2 } => {
            check_regs(&[rd, rs1, rs2])?;
            let kind = sign.code() + if accumulate { 3 } else { 0 };
            match fmt {
                SimdFormat::H | SimdFormat::B => {
                    let f7 = (kind << 2) | ((scalar as u32) << 1) | (fmt == SimdFormat::B) as u32;
                    r_type(OPC_PV, f7, 0, rd, rs1, rs2)
                }
                SimdFormat::N | SimdFormat::C => {
                    let f7 = ((12 + kind) << 2) | ((scalar as u32) << 1) | (fmt == SimdFormat::C) as u32;
                    r_type(OPC_XPULPNN, f7, 0, rd, rs1, rs2)
                }
            }
        }
        VecAlu { op, fmt, scalar, rd, rs1, rs2 } => {
            check_regs(&[rd, rs1, rs2])?;
            if !matches!(fmt, SimdFormat::N | SimdFormat::C) {
                return Err(unencodable(instr, "vector ALU ops exist for nibble and crumb only"));
            }
            if op == VecOp::Abs && (scalar || rs2 != 0) {
                return Err(unencodable(instr, "abs takes a single source"));
            }
            let f7 = (op.code() << 2) | ((scalar as u32) << 1) | (fmt == SimdFormat::C) as u32;
            r_type(OPC_XPULPNN, f7, 0, rd, rs1, rs2)
        }
        ComputeUpdate { fmt, sign, nn, rd, rs1, rs2 } => {
            check_regs(&[rd, rs1, rs2])?;
            if nn >= 4 {
                return Err(unencodable(instr, "NN-RF weight index out of range"));
            }
            let f7 = (sign.code() << 4) | (fmt.code() << 2) | nn as u32;
            r_type(OPC_XPULPNN, f7, 1, rd, rs1, rs2)
        }
        NnSdotp { fmt, sign, rd, rs1, imm } => {
            check_regs(&[rd, rs1])?;
            let f7 = (sign.code() << 2) | fmt.code();
            r_type(OPC_XPULPNN, f7, 2, rd, rs1, imm.bits())
        }
        NnLoad { dst, rs1, offset } => {
            check_regs(&[rs1])?;
            check_imm12(offset)?;
            i_type(OPC_CUSTOM0, 3, dst.index(), rs1, offset)
        }
        Barrier => BARRIER_WORD,
        Halt => HALT_WORD,
    };
    Ok(word)
}

/// Markdown reference of the opcode map, rendered from the codec itself:
/// every example word in the tables is produced by `encode`.
pub fn encoding_reference() -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let ex = |i: Instruction| encode(&i).expect("reference example encodes");
    let _ = writeln!(out, "# Instruction encoding reference\n");
    let _ = writeln!(
        out,
        "Generated from the codec tables (`xpnn::isa::encoding_reference`). All instructions are 32 bits,\n\
         little-endian. Field notation `[hi:lo]` is inclusive. Unlisted field combinations decode as illegal.\n"
    );
    let _ = writeln!(out, "## Major opcodes\n");
    let _ = writeln!(out, "| opcode | group |\n|---|---|");
    for (opc, name) in [
        (OPC_LOAD, "RV32I loads"),
        (OPC_CUSTOM0, "XpulpV2 post-increment memory, bit manipulation, NN-RF load, barrier"),
        (OPC_OP_IMM, "RV32I register-immediate ALU"),
        (OPC_AUIPC, "auipc"),
        (OPC_STORE, "RV32I stores"),
        (OPC_OP, "RV32IM register-register ALU, p.mac, p.min/max"),
        (OPC_LUI, "lui"),
        (OPC_PV, "XpulpV2 16/8-bit dot products"),
        (OPC_XPULPNN, "XpulpNN: nibble/crumb SIMD, Compute&Update, nn_sdotp"),
        (OPC_BRANCH, "branches"),
        (OPC_JALR, "jalr"),
        (OPC_JAL, "jal"),
        (OPC_SYSTEM, "halt (0x00100073 only)"),
        (OPC_HWLOOP, "hardware loops"),
    ] {
        let _ = writeln!(out, "| `{opc:#04x}` | {name} |");
    }

    let _ = writeln!(out, "\n## Scalar register-register (opcode 0x33)\n");
    let _ = writeln!(out, "| mnemonic | funct7 | funct3 |\n|---|---|---|");
    for op in RegOp::ALL {
        let (f7, f3) = op.functs();
        let _ = writeln!(out, "| `{}` | `{f7:#09b}` | `{f3}` |", op.mnemonic());
    }
    let _ = writeln!(out, "\n`p.mac rd, rs1, rs2`: rd ← rd + rs1·rs2. `p.min[u]/p.max[u]`: scalar signed (unsigned) min/max.");

    let _ = writeln!(out, "\n## Custom-0 (opcode 0x0B)\n");
    let _ = writeln!(out, "| funct3 | instruction | layout |\n|---|---|---|");
    let _ = writeln!(out, "| 0 | `p.extract`, `p.extractu`, `p.insert` | [31:30] kind (0 extract, 1 extractu, 2 insert), [29:25] len−1, [24:20] pos, rs1, rd; pos+len ≤ 32 |");
    let _ = writeln!(out, "| 2 | `p.lw rd, imm(rs1!)` | I-type; rd ← mem[rs1], rs1 ← rs1+imm |");
    let _ = writeln!(out, "| 3 | `nn.lw.<r> imm(rs1!)` | I-type; rd field = NN-RF index (0–3 w0–w3, 4–5 a0–a1) |");
    let _ = writeln!(out, "| 6 | `p.sw rs2, imm(rs1!)` | S-type; mem[rs1] ← rs2, rs1 ← rs1+imm |");
    let _ = writeln!(out, "| 7 | `barrier` | word `{BARRIER_WORD:#010x}` only |");

    let _ = writeln!(out, "\n## Hardware loops (opcode 0x7B)\n");
    let _ = writeln!(out, "Bit 7 selects the loop (0 inner, 1 outer). Offsets count instruction words from the\ninstruction itself; the end address is exclusive (first instruction after the body).\n");
    let _ = writeln!(out, "| funct3 | instruction | layout |\n|---|---|---|");
    let _ = writeln!(out, "| 0 | `lp.starti L, target` | [31:20] offset, rs1 = 0 |");
    let _ = writeln!(out, "| 1 | `lp.endi L, target` | [31:20] offset, rs1 = 0 |");
    let _ = writeln!(out, "| 2 | `lp.count L, rs1` | [31:20] = 0 |");
    let _ = writeln!(out, "| 3 | `lp.counti L, count` | [31:20] count, rs1 = 0 |");
    let _ = writeln!(out, "| 4 | `lp.setup L, rs1, end` | [31:20] end offset, rs1 = count register; start = pc+4 |");
    let _ = writeln!(out, "| 5 | `lp.setupi L, count, end` | [31:20] count, [19:15] end offset[4:0], [11:8] end offset[8:5] |");

    let _ = writeln!(out, "\n## XpulpV2 dot products (opcode 0x57, funct3 0)\n");
    let _ = writeln!(out, "funct7 = [6:2] kind, [1] `.sc`, [0] format (0 = h, 1 = b). Kinds: 0 dotup, 1 dotusp, 2 dotsp, 3 sdotup, 4 sdotusp, 5 sdotsp.\n");

    let _ = writeln!(out, "## XpulpNN (opcode 0x5B)\n");
    let _ = writeln!(out, "### funct3 0: nibble/crumb SIMD\n");
    let _ = writeln!(out, "funct7 = [6:2] operation, [1] `.sc` (second operand is lane 0 of rs2 replicated), [0] format (0 = n, 1 = c).\n");
    let _ = writeln!(out, "| code | operation |\n|---|---|");
    for op in VecOp::ALL {
        let _ = writeln!(out, "| {} | `pv.{}` |", op.code(), op.name());
    }
    for (k, name) in ["dotup", "dotusp", "dotsp", "sdotup", "sdotusp", "sdotsp"].iter().enumerate() {
        let _ = writeln!(out, "| {} | `pv.{}` |", 12 + k, name);
    }
    let _ = writeln!(out, "\n`pv.abs` requires rs2 = 0 and no `.sc`. The `.sci` immediate variant does not exist.\n");
    let _ = writeln!(out, "### funct3 1: Compute&Update `pv.cu<sdot>.<fmt>.<i> rd, rs1, rs2`\n");
    let _ = writeln!(out, "funct7 = [6] 0, [5:4] signedness (0 up, 1 usp, 2 sp), [3:2] format (0 h, 1 b, 2 n, 3 c), [1:0] NN-RF weight index.\nrd ← rd + dot(rs2, w[i]); w[i] ← mem[rs1]; rs1 ← rs1 + 4. The register operand takes the first (unsigned under usp) role.\n");
    let _ = writeln!(out, "### funct3 2: `pv.nnsdot<sign>.<fmt> rd, rs1, imm5`\n");
    let _ = writeln!(out, "funct7 = [6:4] 0, [3:2] signedness, [1:0] format. The rs2 field carries imm5:\nbit 0 activation register, bits 2:1 weight register, bit 3 update activation, bit 4 update weight (3 and 4 exclusive).\nrd ← rd + dot(a[imm0], w[imm2:1]); an update loads mem[rs1] into the selected register and post-increments rs1 by 4.\n");

    let _ = writeln!(out, "## Examples\n");
    let _ = writeln!(out, "| instruction | word |\n|---|---|");
    let examples = [
        ("pv.sdotsp.n x5, x6, x7", Instruction::Dot { fmt: SimdFormat::N, sign: Signedness::Sp, accumulate: true, scalar: false, rd: 5, rs1: 6, rs2: 7 }),
        ("pv.sdotusp.b x5, x6, x7", Instruction::Dot { fmt: SimdFormat::B, sign: Signedness::Usp, accumulate: true, scalar: false, rd: 5, rs1: 6, rs2: 7 }),
        ("pv.add.sc.c x1, x2, x3", Instruction::VecAlu { op: VecOp::Add, fmt: SimdFormat::C, scalar: true, rd: 1, rs1: 2, rs2: 3 }),
        ("pv.cusdotusp.b.0 x1, x9, x19", Instruction::ComputeUpdate { fmt: SimdFormat::B, sign: Signedness::Usp, nn: 0, rd: 1, rs1: 9, rs2: 19 }),
        ("pv.nnsdotusp.b x1, x9, a0, w3, upd=w", Instruction::NnSdotp { fmt: SimdFormat::B, sign: Signedness::Usp, rd: 1, rs1: 9, imm: NnImm::new(0b10110).unwrap() }),
        ("nn.lw.a1 4(x14!)", Instruction::NnLoad { dst: NnReg::act(1).unwrap(), rs1: 14, offset: 4 }),
        ("p.lw x8, 4(x9!)", Instruction::LoadPost { rd: 8, rs1: 9, offset: 4 }),
        ("lp.setupi 0, 72, +18", Instruction::HwLoop { level: 0, op: LoopOp::Setupi { count: 72, offset: 18 } }),
        ("barrier", Instruction::Barrier),
        ("halt", Instruction::Halt),
    ];
    for (text, i) in examples {
        let _ = writeln!(out, "| `{text}` | `{:#010x}` |", ex(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_regs() -> impl Iterator<Item = u8> {
        0..32u8
    }

    #[test]
    fn pv_add_roundtrip() {
        let i = Instruction::VecAlu { op: VecOp::Add, fmt: SimdFormat::N, scalar: false, rd: 3, rs1: 4, rs2: 5 };
        assert_eq!(decode(encode(&i).unwrap()).unwrap(), i);
    }

    #[test]
    fn unknown_major_opcodes_are_illegal() {
        let known = [
            OPC_LOAD, OPC_CUSTOM0, OPC_OP_IMM, OPC_AUIPC, OPC_STORE, OPC_OP, OPC_LUI, OPC_PV, OPC_XPULPNN,
            OPC_BRANCH, OPC_JALR, OPC_JAL, OPC_SYSTEM, OPC_HWLOOP,
        ];
        for opc in 0..128u32 {
            if known.contains(&opc) {
                continue;
            }
            let word = 0x00A5_5000 | opc;
            assert_eq!(decode(word), Err(IsaError::IllegalInstruction(word)), "opcode {opc:#x}");
        }
    }

    #[test]
    fn nn_sdotp_with_both_update_bits_is_illegal_operand() {
        let good = Instruction::NnSdotp {
            fmt: SimdFormat::B,
            sign: Signedness::Sp,
            rd: 1,
            rs1: 2,
            imm: NnImm::new(0b00110).unwrap(),
        };
        let word = encode(&good).unwrap() | (0b11000 << 20);
        assert!(matches!(decode(word), Err(IsaError::IllegalOperand { .. })));
        assert!(NnImm::new(0b11000).is_none());
        assert!(NnImm::new(0b11111).is_none());
    }

    #[test]
    fn setupi_loop_index_field() {
        let w0 = encode(&Instruction::HwLoop { level: 0, op: LoopOp::Setupi { count: 5, offset: 3 } }).unwrap();
        let w1 = encode(&Instruction::HwLoop { level: 1, op: LoopOp::Setupi { count: 5, offset: 3 } }).unwrap();
        assert_eq!((w0 >> 7) & 1, 0);
        assert_eq!((w1 >> 7) & 1, 1);
        assert_eq!(w0 ^ w1, 1 << 7);
    }

    #[test]
    fn signedness_is_an_isolated_field() {
        let mk = |sign| Instruction::Dot { fmt: SimdFormat::N, sign, accumulate: true, scalar: false, rd: 9, rs1: 10, rs2: 11 };
        let sp = encode(&mk(Signedness::Sp)).unwrap();
        let up = encode(&mk(Signedness::Up)).unwrap();
        let diff = sp ^ up;
        // only funct7[6:2] (the kind field) may differ
        assert_eq!(diff & !(0x1F << 27), 0);
        assert_ne!(diff, 0);
    }

    #[test]
    fn classification_examples() {
        let sdot = Instruction::Dot { fmt: SimdFormat::N, sign: Signedness::Sp, accumulate: true, scalar: false, rd: 1, rs1: 2, rs2: 3 };
        assert_eq!(classify(&sdot), InstructionClass::SimdMac);
        assert_eq!(classify(&Instruction::LoadPost { rd: 1, rs1: 2, offset: 4 }), InstructionClass::Load);
        let nn = Instruction::NnSdotp { fmt: SimdFormat::B, sign: Signedness::Sp, rd: 1, rs1: 2, imm: NnImm::new(0).unwrap() };
        assert_eq!(classify(&nn), InstructionClass::MacLoad);
        let cu = Instruction::ComputeUpdate { fmt: SimdFormat::C, sign: Signedness::Up, nn: 3, rd: 1, rs1: 2, rs2: 3 };
        assert_eq!(classify(&cu), InstructionClass::MacLoad);
    }

    /// Exhaustive enumeration over every operand combination of
    /// `pv.cusdotusp.b.<i>` (4 × 32³ words).
    #[test]
    fn compute_update_exhaustive_roundtrip() {
        for nn in 0..4u8 {
            for rd in all_regs() {
                for rs1 in all_regs() {
                    for rs2 in all_regs() {
                        let i = Instruction::ComputeUpdate { fmt: SimdFormat::B, sign: Signedness::Usp, nn, rd, rs1, rs2 };
                        let w = encode(&i).unwrap();
                        assert_eq!(decode(w).unwrap(), i);
                    }
                }
            }
        }
    }

    #[test]
    fn nn_sdotp_exhaustive_imm_roundtrip() {
        for sign in Signedness::ALL {
            for fmt in SimdFormat::ALL {
                for bits in 0..32u8 {
                    let Some(imm) = NnImm::new(bits) else { continue };
                    let i = Instruction::NnSdotp { fmt, sign, rd: 7, rs1: 12, imm };
                    assert_eq!(decode(encode(&i).unwrap()).unwrap(), i);
                }
            }
        }
    }

    #[test]
    fn unencodable_fields_are_rejected() {
        let bad = [
            Instruction::Op { op: RegOp::Add, rd: 32, rs1: 0, rs2: 0 },
            Instruction::OpImm { op: ImmOp::Addi, rd: 1, rs1: 1, imm: 2048 },
            Instruction::OpImm { op: ImmOp::Slli, rd: 1, rs1: 1, imm: 32 },
            Instruction::Branch { cond: BranchCond::Eq, rs1: 0, rs2: 0, offset: 3 },
            Instruction::ComputeUpdate { fmt: SimdFormat::B, sign: Signedness::Sp, nn: 4, rd: 1, rs1: 1, rs2: 1 },
            Instruction::VecAlu { op: VecOp::Add, fmt: SimdFormat::B, scalar: false, rd: 1, rs1: 1, rs2: 1 },
            Instruction::Extract { signed: true, rd: 1, rs1: 1, len: 8, pos: 28 },
            Instruction::HwLoop { level: 2, op: LoopOp::Counti { count: 1 } },
            Instruction::HwLoop { level: 0, op: LoopOp::Setupi { count: 1, offset: 512 } },
        ];
        for i in bad {
            assert!(matches!(encode(&i), Err(IsaError::Unencodable(_))), "{i:?}");
        }
    }

    #[test]
    fn lane_geometry() {
        for f in SimdFormat::ALL {
            assert_eq!(f.lane_bits() * f.lane_count(), 32);
        }
        assert_eq!(SimdFormat::N.lane_count(), 8);
        assert_eq!(SimdFormat::C.lane_count(), 16);
    }
}
