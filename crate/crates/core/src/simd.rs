//! Lane-wise semantics of the packed SIMD operations.
//!
//! Lane `i` of a format occupies bits `[i*bits, (i+1)*bits)`; lane 0 is the
//! least significant. Lane arithmetic wraps modulo `2^bits` and dot-product
//! accumulators wrap modulo `2^32`.

use crate::isa::{Signedness, SimdFormat, VecOp};

/// A 32-bit machine word viewed as packed lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SimdWord(pub u32);

impl SimdWord {
    pub fn lane(self, fmt: SimdFormat, i: u32, signed: bool) -> i32 {
        lane(self.0, fmt, i, signed)
    }

    pub fn lanes(self, fmt: SimdFormat, signed: bool) -> Lanes {
        extract_lanes(self.0, fmt, signed)
    }

    /// Packs lane values (truncated to the lane width) into a word.
    pub fn from_lanes(fmt: SimdFormat, lanes: &[i32]) -> SimdWord {
        assert!(lanes.len() <= fmt.lane_count() as usize);
        let bits = fmt.lane_bits();
        let mask = lane_mask(bits);
        let raw = lanes
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, &v)| acc | (((v as u32) & mask) << (i as u32 * bits)));
        SimdWord(raw)
    }
}

impl From<u32> for SimdWord {
    fn from(v: u32) -> Self {
        SimdWord(v)
    }
}

/// Extended lane values of one word, at most 16 of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lanes {
    vals: [i32; 16],
    len: u8,
}

impl std::ops::Deref for Lanes {
    type Target = [i32];

    fn deref(&self) -> &[i32] {
        &self.vals[..self.len as usize]
    }
}

const fn lane_mask(bits: u32) -> u32 {
    if bits == 32 {
        u32::MAX
    } else {
        (1 << bits) - 1
    }
}

#[inline]
fn extend(raw: u32, bits: u32, signed: bool) -> i32 {
    if signed {
        ((raw << (32 - bits)) as i32) >> (32 - bits)
    } else {
        raw as i32
    }
}

/// Lane `i` of `w`, sign- or zero-extended.
#[inline]
pub fn lane(w: u32, fmt: SimdFormat, i: u32, signed: bool) -> i32 {
    let bits = fmt.lane_bits();
    extend((w >> (i * bits)) & lane_mask(bits), bits, signed)
}

pub fn extract_lanes(w: u32, fmt: SimdFormat, signed: bool) -> Lanes {
    let mut vals = [0i32; 16];
    let n = fmt.lane_count();
    for (i, v) in vals.iter_mut().take(n as usize).enumerate() {
        *v = lane(w, fmt, i as u32, signed);
    }
    Lanes { vals, len: n as u8 }
}

/// Replicates lane 0 of `w` across all lanes (the `.sc` operand).
#[inline]
pub fn splat_lane0(w: u32, fmt: SimdFormat) -> u32 {
    let bits = fmt.lane_bits();
    let l0 = w & lane_mask(bits);
    (0..fmt.lane_count()).fold(0, |acc, i| acc | (l0 << (i * bits)))
}

/// Sum of lane products, wrapped to 32 bits.
#[inline]
pub fn dotp(a: u32, b: u32, fmt: SimdFormat, sign: Signedness) -> i32 {
    let (sa, sb) = (sign.first_signed(), sign.second_signed());
    let mut sum: i64 = 0;
    for i in 0..fmt.lane_count() {
        sum += lane(a, fmt, i, sa) as i64 * lane(b, fmt, i, sb) as i64;
    }
    sum as i32
}

#[inline]
pub fn sdotp(a: u32, b: u32, acc: i32, fmt: SimdFormat, sign: Signedness) -> i32 {
    acc.wrapping_add(dotp(a, b, fmt, sign))
}

/// Lane-wise vector ALU operation. With `scalar`, every lane of `b` is
/// replaced by lane 0 of `b`.
pub fn vec_alu(op: VecOp, a: u32, b: u32, fmt: SimdFormat, scalar: bool) -> u32 {
    let b = if scalar { splat_lane0(b, fmt) } else { b };
    let bits = fmt.lane_bits();
    let mask = lane_mask(bits);
    let shift_mask = bits - 1;
    let mut out = 0u32;
    for i in 0..fmt.lane_count() {
        let (sa, sb) = (lane(a, fmt, i, true), lane(b, fmt, i, true));
        let (ua, ub) = (lane(a, fmt, i, false), lane(b, fmt, i, false));
        let r: i32 = match op {
            VecOp::Add => sa.wrapping_add(sb),
            VecOp::Sub => sa.wrapping_sub(sb),
            VecOp::Avg => (sa + sb) >> 1,
            VecOp::Avgu => (ua + ub) >> 1,
            VecOp::Max => sa.max(sb),
            VecOp::Maxu => ua.max(ub),
            VecOp::Min => sa.min(sb),
            VecOp::Minu => ua.min(ub),
            VecOp::Srl => ua >> (ub as u32 & shift_mask),
            VecOp::Sra => sa >> (ub as u32 & shift_mask),
            VecOp::Sll => ((ua as u32) << (ub as u32 & shift_mask)) as i32,
            VecOp::Abs => sa.wrapping_abs(),
        };
        out |= ((r as u32) & mask) << (i * bits);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_examples() {
        assert_eq!(&*extract_lanes(0xF0F0F0F0, SimdFormat::N, false), &[0, 15, 0, 15, 0, 15, 0, 15]);
        assert_eq!(&*extract_lanes(0xFFFFFFFF, SimdFormat::C, true), &[-1; 16]);
        for f in SimdFormat::ALL {
            for s in [false, true] {
                assert!(extract_lanes(0, f, s).iter().all(|&v| v == 0));
            }
        }
    }

    #[test]
    fn dotp_examples() {
        assert_eq!(dotp(0x11111111, 0x11111111, SimdFormat::N, Signedness::Up), 8);
        assert_eq!(dotp(0xFFFFFFFF, 0x55555555, SimdFormat::C, Signedness::Sp), -16);
        assert_eq!(dotp(0x01020304, 0x01010101, SimdFormat::B, Signedness::Up), 10);
        assert_eq!(sdotp(0xFFFFFFFF, 0x55555555, 100, SimdFormat::C, Signedness::Sp), 84);
        // 1·1 in lane 0 only
        assert_eq!(sdotp(1, 1, i32::MAX, SimdFormat::B, Signedness::Up), i32::MIN);
    }

    #[test]
    fn usp_reads_first_operand_unsigned() {
        // lane 0: a = 0xF (15 unsigned), b = 0xF (-1 signed)
        assert_eq!(dotp(0xF, 0xF, SimdFormat::N, Signedness::Usp), -15);
        assert_eq!(dotp(0xF, 0xF, SimdFormat::N, Signedness::Sp), 1);
        assert_eq!(dotp(0xF, 0xF, SimdFormat::N, Signedness::Up), 225);
    }

    #[test]
    fn vec_alu_examples() {
        assert_eq!(vec_alu(VecOp::Add, 0x11111111, 0x11111111, SimdFormat::N, false), 0x22222222);
        assert_eq!(vec_alu(VecOp::Max, 0xFFFFFFFF, 0, SimdFormat::C, false), 0);
        assert_eq!(vec_alu(VecOp::Abs, 0xF, 0, SimdFormat::N, false), 0x1);
        assert_eq!(vec_alu(VecOp::Abs, 0x8, 0, SimdFormat::N, false), 0x8);
        assert_eq!(vec_alu(VecOp::Add, 0, 0x3, SimdFormat::N, true), 0x33333333);
        assert_eq!(vec_alu(VecOp::Avg, 0xF, 0x1, SimdFormat::N, false), 0x0);
        assert_eq!(vec_alu(VecOp::Avgu, 0xF, 0x1, SimdFormat::N, false), 0x8);
        // shift amount 5 masked to 1 for nibbles
        assert_eq!(vec_alu(VecOp::Sll, 0x1, 0x5, SimdFormat::N, false), 0x2);
    }

    #[test]
    fn from_lanes_inverts_extract() {
        let w = SimdWord::from_lanes(SimdFormat::N, &[-8, 7, 0, 1, -1, 2, 3, 4]);
        assert_eq!(&*w.lanes(SimdFormat::N, true), &[-8, 7, 0, 1, -1, 2, 3, 4]);
    }
}
