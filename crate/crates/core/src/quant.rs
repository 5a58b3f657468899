//! Quantization arithmetic, sub-byte packing, tensor files and the golden
//! reference convolution.
//!
//! A tensor `t` in `[alpha, beta]` is represented by an integer image `t̂`
//! with `t = alpha + eps * (t̂ - t̂_min)`, where `eps = (beta - alpha) /
//! (2^N - 1)` and `t̂_min` is 0 for unsigned images and `-2^(N-1)` for
//! signed ones. Linear layers accumulate integer images in 32 bits, batch
//! normalization computes `κ̂·φ̂ + λ̂`, and the activation requantizes with
//! `clip((m·φ̂') >> d)`.

use std::fmt::Write as _;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("value {value} out of range for {bits}-bit {} data", if *signed { "signed" } else { "unsigned" })]
    Range { value: i64, bits: u32, signed: bool },
    #[error("unsupported bit width {0}")]
    Bits(u32),
    #[error("invalid quantization range [{alpha}, {beta}]")]
    Interval { alpha: f64, beta: f64 },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("tensor file line {line}: {msg}")]
    Format { line: usize, msg: String },
}

fn check_bits(bits: u32) -> Result<(), QuantError> {
    match bits {
        2 | 4 | 8 => Ok(()),
        b => Err(QuantError::Bits(b)),
    }
}

/// Integer image range for `bits`-wide data.
pub const fn int_range(bits: u32, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

/// Real-valued quantization of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec<T> {
    pub bits: u32,
    pub alpha: T,
    pub beta: T,
    pub signed: bool,
}

impl<T: Float> QuantSpec<T> {
    pub fn new(bits: u32, alpha: T, beta: T, signed: bool) -> Result<Self, QuantError> {
        check_bits(bits)?;
        if !alpha.is_finite() || !beta.is_finite() || beta <= alpha {
            return Err(QuantError::Interval {
                alpha: alpha.to_f64().unwrap_or(f64::NAN),
                beta: beta.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(QuantSpec { bits, alpha, beta, signed })
    }

    /// Activation-style spec: `alpha = 0`, unsigned image.
    pub fn activation(bits: u32, beta: T) -> Result<Self, QuantError> {
        Self::new(bits, T::zero(), beta, false)
    }

    /// The quantum.
    pub fn eps(&self) -> T {
        let levels = T::from((1u32 << self.bits) - 1).expect("level count fits the float type");
        (self.beta - self.alpha) / levels
    }

    pub fn int_range(&self) -> (i32, i32) {
        int_range(self.bits, self.signed)
    }

    /// Nearest integer image of `x`, saturating outside `[alpha, beta]`.
    pub fn quantize(&self, x: T) -> i32 {
        let (lo, hi) = self.int_range();
        let x = x.max(self.alpha).min(self.beta);
        let steps = ((x - self.alpha) / self.eps()).round().to_i64().unwrap_or(0);
        (lo as i64 + steps).clamp(lo as i64, hi as i64) as i32
    }

    pub fn dequantize(&self, q: i32) -> T {
        let (lo, _) = self.int_range();
        self.alpha + self.eps() * T::from(q - lo).expect("integer image fits the float type")
    }
}

/// Multiplier `m = floor(eps_phi · 2^d / eps_y)` mapping an accumulator
/// quantum onto an output quantum.
pub fn requant_multiplier<T: Float>(eps_phi: T, eps_y: T, d: u32) -> Result<i32, QuantError> {
    let two = T::one() + T::one();
    let m = (eps_phi * two.powi(d as i32) / eps_y).floor();
    m.to_i32().ok_or(QuantError::Range { value: m.to_i64().unwrap_or(i64::MAX), bits: 32, signed: true })
}

/// Packs integer images LSB-first: element `j` occupies bits
/// `[(j % per_byte)·bits, ...)` of byte `j / per_byte`.
pub fn pack(values: &[i32], bits: u32, signed: bool) -> Result<Vec<u8>, QuantError> {
    check_bits(bits)?;
    let (lo, hi) = int_range(bits, signed);
    let per_byte = (8 / bits) as usize;
    let mut out = vec![0u8; values.len().div_ceil(per_byte)];
    let mask = ((1u32 << bits) - 1) as u8;
    for (j, &v) in values.iter().enumerate() {
        if v < lo || v > hi {
            return Err(QuantError::Range { value: v as i64, bits, signed });
        }
        out[j / per_byte] |= ((v as u8) & mask) << ((j % per_byte) as u32 * bits);
    }
    Ok(out)
}

pub fn unpack(bytes: &[u8], bits: u32, signed: bool, count: usize) -> Vec<i32> {
    let per_byte = (8 / bits) as usize;
    (0..count)
        .map(|j| {
            let raw = (bytes[j / per_byte] >> ((j % per_byte) as u32 * bits)) as u32 & ((1 << bits) - 1);
            if signed {
                ((raw << (32 - bits)) as i32) >> (32 - bits)
            } else {
                raw as i32
            }
        })
        .collect()
}

/// Integer dot product of two images, wrapping in 32 bits.
pub fn lin(w: &[i32], x: &[i32]) -> i32 {
    assert_eq!(w.len(), x.len(), "operand lengths differ");
    w.iter().zip(x).fold(0i32, |acc, (&a, &b)| acc.wrapping_add(a.wrapping_mul(b)))
}

pub fn batch_norm(phi: i32, kappa: i32, lambda: i32) -> i32 {
    kappa.wrapping_mul(phi).wrapping_add(lambda)
}

/// `clip((m·φ') >> d)` with the product in 64 bits and an arithmetic shift.
/// The clip range is `[0, 2^N - 1]`, or the signed range when `signed_out`.
pub fn requantize(phi_prime: i32, m: i32, d: u32, out_bits: u32, signed_out: bool) -> i32 {
    let v = (m as i64 * phi_prime as i64) >> d;
    let (lo, hi) = int_range(out_bits, signed_out);
    v.clamp(lo as i64, hi as i64) as i32
}

/// Per-output-channel batch-norm and requantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub kappa: i32,
    pub lambda: i32,
    pub m: i32,
    pub d: u32,
}

impl RequantParams {
    pub fn identity() -> Self {
        RequantParams { kappa: 1, lambda: 0, m: 1, d: 0 }
    }

    /// Parameters with `m` derived from the accumulator and output quanta.
    pub fn from_quanta<T: Float>(kappa: i32, lambda: i32, eps_phi: T, eps_y: T, d: u32) -> Result<Self, QuantError> {
        Ok(RequantParams { kappa, lambda, m: requant_multiplier(eps_phi, eps_y, d)?, d })
    }

    pub fn apply(&self, phi: i32, out_bits: u32, signed_out: bool) -> i32 {
        requantize(batch_norm(phi, self.kappa, self.lambda), self.m, self.d, out_bits, signed_out)
    }
}

/// A packed integer tensor. Activations use HWC order, weights KFFC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub spec: QuantSpec<f64>,
    pub data: Vec<u8>,
}

impl QuantTensor {
    pub fn from_values(shape: &[usize], spec: QuantSpec<f64>, values: &[i32]) -> Result<Self, QuantError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(QuantError::Geometry(format!("shape {shape:?} holds {n} elements, got {}", values.len())));
        }
        Ok(QuantTensor { shape: shape.to_vec(), spec, data: pack(values, spec.bits, spec.signed)? })
    }

    /// Uniformly random integer images over the full range.
    pub fn random(shape: &[usize], spec: QuantSpec<f64>, rng: &mut impl Rng) -> Self {
        let (lo, hi) = spec.int_range();
        let n: usize = shape.iter().product();
        let values: Vec<i32> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
        Self::from_values(shape, spec, &values).expect("random values are in range")
    }

    pub fn bits(&self) -> u32 {
        self.spec.bits
    }

    pub fn signed(&self) -> bool {
        self.spec.signed
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<i32> {
        unpack(&self.data, self.spec.bits, self.spec.signed, self.len())
    }

    /// Text form: header lines, then the packed bytes in hex.
    pub fn to_text(&self) -> String {
        let mut out = String::from("qtensor v1\n");
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "dims {}", dims.join(" "));
        let _ = writeln!(out, "bits {}", self.spec.bits);
        let _ = writeln!(out, "signed {}", self.spec.signed as u8);
        let _ = writeln!(out, "alpha {:?}", self.spec.alpha);
        let _ = writeln!(out, "beta {:?}", self.spec.beta);
        let _ = writeln!(out, "data");
        for chunk in self.data.chunks(32) {
            for b in chunk {
                let _ = write!(out, "{b:02x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, QuantError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let fmt = |line: usize, msg: &str| QuantError::Format { line, msg: msg.to_string() };
        match lines.next() {
            Some((_, "qtensor v1")) => {}
            _ => return Err(fmt(1, "missing `qtensor v1` header")),
        }
        let mut field = |key: &str| -> Result<(usize, String), QuantError> {
            let (n, l) = lines.next().ok_or_else(|| fmt(0, &format!("missing `{key}`")))?;
            let rest = l.strip_prefix(key).ok_or_else(|| fmt(n, &format!("expected `{key}`")))?;
            Ok((n, rest.trim().to_string()))
        };
        let (n, dims) = field("dims")?;
        let shape = dims
            .split_whitespace()
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| fmt(n, "bad dims"))?;
        let (n, bits) = field("bits")?;
        let bits = bits.parse().map_err(|_| fmt(n, "bad bits"))?;
        let (n, signed) = field("signed")?;
        let signed = match signed.as_str() {
            "0" => false,
            "1" => true,
            _ => return Err(fmt(n, "signed must be 0 or 1")),
        };
        let (n, alpha) = field("alpha")?;
        let alpha: f64 = alpha.parse().map_err(|_| fmt(n, "bad alpha"))?;
        let (n, beta) = field("beta")?;
        let beta: f64 = beta.parse().map_err(|_| fmt(n, "bad beta"))?;
        let (n, rest) = field("data")?;
        if !rest.is_empty() {
            return Err(fmt(n, "unexpected text after `data`"));
        }
        let mut data = Vec::new();
        for (n, l) in lines {
            if l.len() % 2 != 0 {
                return Err(fmt(n, "odd number of hex digits"));
            }
            for i in (0..l.len()).step_by(2) {
                data.push(u8::from_str_radix(&l[i..i + 2], 16).map_err(|_| fmt(n, "bad hex byte"))?);
            }
        }
        let spec = QuantSpec::new(bits, alpha, beta, signed)?;
        let count: usize = shape.iter().product();
        if data.len() != (count * bits as usize).div_ceil(8) {
            return Err(fmt(0, "payload size does not match dims and bits"));
        }
        Ok(QuantTensor { shape, spec, data })
    }
}

/// Convolution geometry: HWC input, `c_out` square `f × f` filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub h_in: usize,
    pub w_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Stride 1 with "same" padding.
    pub fn same(h: usize, w: usize, c_in: usize, c_out: usize, f: usize) -> Self {
        ConvGeometry { h_in: h, w_in: w, c_in, c_out, f, stride: 1, pad: f / 2 }
    }

    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad).saturating_sub(self.f) / self.stride.max(1) + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad).saturating_sub(self.f) / self.stride.max(1) + 1
    }

    /// Receptive field length `f·f·c_in`.
    pub fn k(&self) -> usize {
        self.f * self.f * self.c_in
    }

    pub fn macs(&self) -> u64 {
        (self.h_out() * self.w_out() * self.c_out * self.k()) as u64
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let dims = [self.h_in, self.w_in, self.c_in, self.c_out, self.f, self.stride];
        if dims.contains(&0) {
            return Err(QuantError::Geometry(format!("zero dimension in {self:?}")));
        }
        if self.h_in + 2 * self.pad < self.f || self.w_in + 2 * self.pad < self.f {
            return Err(QuantError::Geometry("filter larger than padded input".into()));
        }
        Ok(())
    }
}

/// Reference convolution: unpack everything, then a direct six-deep loop
/// followed by batch norm and requantization per output.
pub fn golden_conv(
    input: &QuantTensor,
    weights: &QuantTensor,
    params: &[RequantParams],
    geom: &ConvGeometry,
    out_spec: QuantSpec<f64>,
) -> Result<QuantTensor, QuantError> {
    geom.validate()?;
    let g = geom;
    if input.shape != [g.h_in, g.w_in, g.c_in] {
        return Err(QuantError::Geometry(format!("input shape {:?} does not match {g:?}", input.shape)));
    }
    if weights.shape != [g.c_out, g.f, g.f, g.c_in] {
        return Err(QuantError::Geometry(format!("weight shape {:?} does not match {g:?}", weights.shape)));
    }
    if params.len() != g.c_out {
        return Err(QuantError::Geometry(format!("{} parameter sets for {} channels", params.len(), g.c_out)));
    }
    let x = input.values();
    let w = weights.values();
    let (h_out, w_out) = (g.h_out(), g.w_out());
    let mut out = vec![0i32; h_out * w_out * g.c_out];
    for oy in 0..h_out {
        for ox in 0..w_out {
            for k in 0..g.c_out {
                let mut acc = 0i32;
                for fy in 0..g.f {
                    for fx in 0..g.f {
                        let iy = (oy * g.stride + fy) as isize - g.pad as isize;
                        let ix = (ox * g.stride + fx) as isize - g.pad as isize;
                        if iy < 0 || ix < 0 || iy >= g.h_in as isize || ix >= g.w_in as isize {
                            continue;
                        }
                        for c in 0..g.c_in {
                            let xv = x[(iy as usize * g.w_in + ix as usize) * g.c_in + c];
                            let wv = w[((k * g.f + fy) * g.f + fx) * g.c_in + c];
                            acc = acc.wrapping_add(xv.wrapping_mul(wv));
                        }
                    }
                }
                out[(oy * w_out + ox) * g.c_out + k] = params[k].apply(acc, out_spec.bits, out_spec.signed);
            }
        }
    }
    QuantTensor::from_values(&[h_out, w_out, g.c_out], out_spec, &out)
}
