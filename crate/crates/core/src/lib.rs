//! Cycle-approximate simulation of a RISC-V cluster extended with sub-byte
//! SIMD and fused mac&load instructions, with a quantized convolution kernel
//! suite verified against a golden model.

pub mod asm;
pub mod bench;
pub mod cluster;
pub mod core_sim;
pub mod isa;
pub mod kernels;
pub mod quant;
pub mod simd;

pub use asm::{assemble, disassemble, AsmError, ProgramImage};
pub use core_sim::{Core, CycleReport, FlatMemory, Program, SimError};
pub use isa::{classify, decode, encode, Instruction, InstructionClass, IsaError, Signedness, SimdFormat};
pub use quant::{ConvGeometry, QuantError, QuantTensor, RequantParams};

pub type QuantSpecF32 = quant::QuantSpec<f32>;
pub type QuantSpecF64 = quant::QuantSpec<f64>;
