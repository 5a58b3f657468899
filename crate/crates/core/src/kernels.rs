//! Quantized convolution kernels emitted as assembly.
//!
//! Every variant shares the same outer structure: output rows are dealt
//! round-robin to cores, each core gathers a block of output pixels into
//! per-core im2col buffers, then sweeps the output channels four at a time
//! with a MatMul inner loop followed by an exact requantization tail.
//!
//! Data layout in TCDM: activations HWC, weights KFFC, both packed
//! LSB-first; parameters are `(κ, λ, m)` word triplets per channel.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::asm::{assemble, AsmError, ProgramImage};
use crate::cluster::{run_parallel, Cluster, ClusterConfig, ClusterReport, Tcdm};
use crate::core_sim::{profile_range, ClassCounts, Core, MemFault, PcStat, Program, SimError, TCDM_BASE};
use crate::isa::decode;
use crate::quant::{golden_conv, int_range, ConvGeometry, QuantError, QuantSpec, QuantTensor, RequantParams};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("unsupported geometry: {0}")]
    Geometry(String),
    #[error("layer needs {need} bytes of TCDM, {have} available")]
    Capacity { need: usize, have: usize },
    #[error("kernel resource limit: {0}")]
    Resource(String),
    #[error("requantization parameters not supported by the kernel: {0}")]
    Params(String),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// MatMul inner-loop flavour and output block shape (channels x pixels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Explicit loads and plain SIMD dot products.
    Simd4x2,
    /// Weights streamed through the NN register file by compute&update.
    Cu4x2,
    /// Fused mac&load with the NN register file for weights and activations.
    Nn4x2,
    Nn4x4,
    /// Sub-byte data unpacked to bytes in software before 8-bit dot products.
    Unpack4x2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Simd4x2, Variant::Cu4x2, Variant::Nn4x2, Variant::Nn4x4, Variant::Unpack4x2];

    pub const fn name(self) -> &'static str {
        match self {
            Variant::Simd4x2 => "simd-4x2",
            Variant::Cu4x2 => "cu-4x2",
            Variant::Nn4x2 => "nn-4x2",
            Variant::Nn4x4 => "nn-4x4",
            Variant::Unpack4x2 => "unpack-4x2",
        }
    }

    /// Output pixels computed per inner loop.
    pub const fn pixels(self) -> usize {
        match self {
            Variant::Nn4x4 => 4,
            _ => 2,
        }
    }

    pub const fn supports(self, bits: u32) -> bool {
        match self {
            Variant::Unpack4x2 => matches!(bits, 2 | 4),
            _ => matches!(bits, 2 | 4 | 8),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected one of simd-4x2, cu-4x2, nn-4x2, nn-4x4, unpack-4x2)"))
    }
}

/// Byte addresses of every region a kernel touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcdmLayout {
    pub input: u32,
    pub weights: u32,
    pub params: u32,
    pub output: u32,
    /// im2col buffers of core 0; core `i` starts `i * buffer_stride` later.
    pub buffers: u32,
    pub buffer_stride: u32,
    /// Per-core loop state, 16 bytes per core.
    pub ctx: u32,
    pub end: u32,
}

impl TcdmLayout {
    pub fn bytes(&self) -> usize {
        (self.end - self.input) as usize
    }

    /// One `name address size` line per region.
    pub fn manifest(&self) -> String {
        let rows = [
            ("input", self.input, self.weights),
            ("weights", self.weights, self.params),
            ("params", self.params, self.output),
            ("output", self.output, self.buffers),
            ("im2col", self.buffers, self.ctx),
            ("ctx", self.ctx, self.end),
        ];
        let mut s = String::new();
        for (name, a, b) in rows {
            let _ = writeln!(s, "{name:<8} 0x{a:08x} {:>6}", b - a);
        }
        s
    }
}

/// A layer's tensors and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    pub geom: ConvGeometry,
    pub input: QuantTensor,
    pub weights: QuantTensor,
    pub params: Vec<RequantParams>,
    pub out_spec: QuantSpec<f64>,
}

impl LayerData {
    /// Random activations and weights at `bits`, with per-channel parameters
    /// sized so outputs cover most of the output range.
    pub fn random(geom: ConvGeometry, bits: u32, shift: u32, rng: &mut impl Rng) -> Result<Self, QuantError> {
        geom.validate()?;
        let in_spec = QuantSpec::new(bits, 0.0, 1.0, false)?;
        let w_spec = QuantSpec::new(bits, -1.0, 1.0, true)?;
        let out_spec = QuantSpec::activation(bits, 1.0)?;
        let input = QuantTensor::random(&[geom.h_in, geom.w_in, geom.c_in], in_spec, rng);
        let weights = QuantTensor::random(&[geom.c_out, geom.f, geom.f, geom.c_in], w_spec, rng);

        let levels = (1u64 << bits) as f64;
        let var = (levels * levels - 1.0) / 12.0;
        let x_mean = (levels - 1.0) / 2.0;
        let k = geom.k() as f64;
        let mean = -0.5 * x_mean * k;
        let sigma = (k * (var * var + var * 0.25 + x_mean * x_mean * var)).sqrt().max(1.0);
        let out_max = int_range(bits, false).1 as f64;
        let params = (0..geom.c_out)
            .map(|_| {
                let kappa = rng.gen_range(1..=4);
                let jitter = rng.gen_range(-0.5..0.5) * sigma;
                let lambda = (kappa as f64 * (2.0 * sigma - mean + jitter)).round() as i32;
                let m = (out_max * 2f64.powi(shift as i32) / (4.0 * kappa as f64 * sigma)).round().max(1.0) as i32;
                RequantParams { kappa, lambda, m, d: shift }
            })
            .collect();
        Ok(LayerData { geom, input, weights, params, out_spec })
    }

    pub fn golden(&self) -> Result<QuantTensor, QuantError> {
        golden_conv(&self.input, &self.weights, &self.params, &self.geom, self.out_spec)
    }
}

/// Cycles spent in each kernel phase on one core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCycles {
    pub im2col: u64,
    pub matmul: u64,
    pub requant: u64,
    pub other: u64,
}

impl PhaseCycles {
    pub fn total(&self) -> u64 {
        self.im2col + self.matmul + self.requant + self.other
    }

    pub fn add(&mut self, o: &PhaseCycles) {
        self.im2col += o.im2col;
        self.matmul += o.matmul;
        self.requant += o.requant;
        self.other += o.other;
    }
}

#[derive(Debug, Clone)]
pub struct LayerRun {
    pub output: QuantTensor,
    pub report: ClusterReport,
    pub phases: Vec<PhaseCycles>,
    /// Inner-loop statistics summed over cores.
    pub inner: PcStat,
}

impl LayerRun {
    pub fn cycles(&self) -> u64 {
        self.report.aggregate.cycles
    }

    pub fn phase_sum(&self) -> PhaseCycles {
        let mut p = PhaseCycles::default();
        for c in &self.phases {
            p.add(c);
        }
        p
    }

    /// MAC-class over all instructions retired inside the inner loop.
    pub fn dynamic_opef(&self) -> f64 {
        self.inner.mac_retired as f64 / self.inner.retired.max(1) as f64
    }
}

/// Derived sizes shared by the code generators.
#[derive(Debug, Clone, Copy)]
struct Dims {
    bits: u32,
    /// Words per filter tap (one input pixel, all channels).
    tw: u32,
    /// Words per im2col row.
    kw: u32,
    kwb: i32,
    /// Bytes per output pixel.
    pixb: i32,
    /// Bytes per input pixel and per input row.
    cb: u32,
    rowb: u32,
    shift: u32,
}

impl Dims {
    fn fmt(&self) -> &'static str {
        match self.bits {
            8 => "b",
            4 => "n",
            _ => "c",
        }
    }
}

/// A generated kernel for one layer geometry and cluster size.
#[derive(Debug, Clone)]
pub struct KernelPlan {
    pub variant: Variant,
    pub bits: u32,
    pub geom: ConvGeometry,
    pub n_cores: usize,
    pub shift: u32,
    pub layout: TcdmLayout,
    pub source: String,
    pub image: ProgramImage,
    program: Arc<Program>,
}

impl KernelPlan {
    /// Generates and assembles the kernel. `shift` is the requantization
    /// shift `d` baked into the code; all channels must share it.
    pub fn new(variant: Variant, bits: u32, geom: ConvGeometry, n_cores: usize, shift: u32) -> Result<Self, KernelError> {
        Self::with_tcdm(variant, bits, geom, n_cores, shift, ClusterConfig::default().tcdm_bytes)
    }

    pub fn with_tcdm(
        variant: Variant,
        bits: u32,
        geom: ConvGeometry,
        n_cores: usize,
        shift: u32,
        tcdm_bytes: usize,
    ) -> Result<Self, KernelError> {
        geom.validate()?;
        if !variant.supports(bits) {
            return Err(KernelError::Geometry(format!("{variant} does not support {bits}-bit data")));
        }
        if shift > 31 {
            return Err(KernelError::Params(format!("shift {shift} exceeds 31")));
        }
        if n_cores == 0 {
            return Err(KernelError::Geometry("zero cores".into()));
        }
        let g = &geom;
        if !(g.c_in as u32 * bits).is_multiple_of(32) {
            return Err(KernelError::Geometry(format!(
                "input channels x bits ({} x {bits}) must be a multiple of 32",
                g.c_in
            )));
        }
        if !g.c_out.is_multiple_of(4) {
            return Err(KernelError::Geometry(format!("output channels {} not a multiple of 4", g.c_out)));
        }
        if !g.w_out().is_multiple_of(variant.pixels()) {
            return Err(KernelError::Geometry(format!(
                "output width {} not a multiple of {} pixels",
                g.w_out(),
                variant.pixels()
            )));
        }
        let tw = g.c_in as u32 * bits / 32;
        let kw = tw * (g.f * g.f) as u32;
        if kw > 4095 || tw * g.f as u32 > 4095 {
            return Err(KernelError::Resource(format!("{kw} words per im2col row exceed the loop count range")));
        }
        let cb = g.c_in as u32 * bits / 8;
        let pixb = (g.c_out as u32 * bits / 8) as i32;
        if pixb * (variant.pixels() as i32 - 1) > 2047 {
            return Err(KernelError::Resource("output pixel stride exceeds store offset range".into()));
        }
        let d = Dims {
            bits,
            tw,
            kw,
            kwb: 4 * kw as i32,
            pixb,
            cb,
            rowb: cb * g.w_in as u32,
            shift,
        };

        let round4 = |b: usize| b.div_ceil(4) * 4;
        let input = TCDM_BASE;
        let weights = input + round4(g.h_in * g.w_in * cb as usize) as u32;
        // two guard words absorb the one-word weight prefetch past the last row
        let params = weights + (g.c_out as u32 * kw + 2) * 4;
        let output = params + g.c_out as u32 * 12;
        let buffers = output + round4(g.h_out() * g.w_out() * pixb as usize) as u32;
        let buffer_stride = (variant.pixels() as u32 * kw + 2) * 4;
        let ctx = buffers + buffer_stride * n_cores as u32;
        let end = ctx + 16 * n_cores as u32;
        let layout = TcdmLayout { input, weights, params, output, buffers, buffer_stride, ctx, end };
        if layout.bytes() > tcdm_bytes {
            return Err(KernelError::Capacity { need: layout.bytes(), have: tcdm_bytes });
        }

        let source = generate(variant, &geom, &d, &layout);
        let image = assemble(&source)?;
        let program = Arc::new(Program::from_image(&image));
        Ok(KernelPlan { variant, bits, geom, n_cores, shift, layout, source, image, program })
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    fn sym(&self, name: &str) -> u32 {
        self.image.symbol(name).expect("generated kernels define every phase label")
    }

    /// `[start, end)` addresses of the inner MatMul loop body.
    pub fn inner_loop(&self) -> (u32, u32) {
        (self.sym("inner_begin"), self.sym("inner_end"))
    }

    /// Instruction classes in one pass of the inner loop body.
    pub fn inner_loop_mix(&self) -> ClassCounts {
        let (a, b) = self.inner_loop();
        let mut mix = ClassCounts::default();
        for pc in (a..b).step_by(4) {
            let i = (pc - self.program.base()) as usize / 4;
            let instr = decode(self.program.words()[i]).expect("generated code decodes");
            mix.bump(instr.class());
        }
        mix
    }

    /// MAC-class fraction of the inner loop body.
    pub fn static_opef(&self) -> f64 {
        let mix = self.inner_loop_mix();
        (mix.simd_mac + mix.mac_load) as f64 / mix.total().max(1) as f64
    }

    pub fn check_data(&self, data: &LayerData) -> Result<(), KernelError> {
        if data.geom != self.geom {
            return Err(KernelError::Geometry("layer data geometry differs from the plan".into()));
        }
        if data.input.bits() != self.bits || data.weights.bits() != self.bits || data.out_spec.bits != self.bits {
            return Err(KernelError::Geometry(format!("tensors must all be {}-bit", self.bits)));
        }
        if data.input.signed() || !data.weights.signed() || data.out_spec.signed {
            return Err(KernelError::Geometry("kernels take unsigned activations and signed weights".into()));
        }
        if data.params.len() != self.geom.c_out {
            return Err(KernelError::Geometry(format!("{} parameter sets for {} channels", data.params.len(), self.geom.c_out)));
        }
        for (k, p) in data.params.iter().enumerate() {
            if p.d != self.shift {
                return Err(KernelError::Params(format!("channel {k} shift {} differs from kernel shift {}", p.d, self.shift)));
            }
            if p.m < 0 {
                return Err(KernelError::Params(format!("channel {k} has negative multiplier {}", p.m)));
            }
        }
        Ok(())
    }

    fn load(&self, data: &LayerData, t: &mut Tcdm) -> Result<(), MemFault> {
        let l = &self.layout;
        t.write_bytes(l.input, &data.input.data)?;
        t.write_bytes(l.weights, &data.weights.data)?;
        let words: Vec<u32> = data.params.iter().flat_map(|p| [p.kappa as u32, p.lambda as u32, p.m as u32]).collect();
        t.write_words(l.params, &words)
    }

    /// Runs the kernel on `n_banks` banks and reads back the output tensor.
    pub fn run(&self, data: &LayerData, n_banks: usize, max_cycles: u64) -> Result<LayerRun, KernelError> {
        self.run_keep(data, n_banks, max_cycles).map(|(run, _)| run)
    }

    /// Like [`KernelPlan::run`], also handing back the halted cluster.
    pub fn run_keep(&self, data: &LayerData, n_banks: usize, max_cycles: u64) -> Result<(LayerRun, Cluster), KernelError> {
        self.check_data(data)?;
        let mut cfg = ClusterConfig::with_cores(self.n_cores, n_banks);
        cfg.tcdm_bytes = cfg.tcdm_bytes.max(self.layout.bytes());
        let (mut cluster, report) = run_parallel(cfg, self.program.clone(), |t| self.load(data, t), None, max_cycles)?;
        let g = &self.geom;
        let n = g.h_out() * g.w_out() * g.c_out;
        let bytes = cluster
            .tcdm_mut()
            .read_bytes(self.layout.output, n * self.bits as usize / 8)
            .map_err(|f| SimError::Protocol(format!("output readback failed: {f}")))?;
        let output = QuantTensor { shape: vec![g.h_out(), g.w_out(), g.c_out], spec: data.out_spec, data: bytes };
        let phases = cluster.cores().iter().map(|c| self.phases_of(c)).collect();
        let (a, b) = self.inner_loop();
        let mut inner = PcStat::default();
        for c in cluster.cores() {
            let s = profile_range(c, a, b);
            inner.retired += s.retired;
            inner.cycles += s.cycles;
            inner.mac_retired += s.mac_retired;
        }
        Ok((LayerRun { output, report, phases, inner }, cluster))
    }

    fn phases_of(&self, core: &Core) -> PhaseCycles {
        let cyc = |a: &str, b: &str| profile_range(core, self.sym(a), self.sym(b)).cycles;
        let im2col = cyc("im_begin", "im_end");
        let matmul = cyc("mm_begin", "rq_begin");
        let requant = cyc("rq_begin", "grp_end");
        let total = core.report().cycles;
        PhaseCycles { im2col, matmul, requant, other: total.saturating_sub(im2col + matmul + requant) }
    }
}

/// Static and dynamic OPEF of a hardware loop of two loads and one SIMD
/// dot product, the plain-ISA lower bound.
pub fn load_load_mac_opef(iterations: u32) -> Result<(f64, f64), KernelError> {
    let src = format!(
        "_start:\n    li x5, 0x{a:08x}\n    li x6, 0x{b:08x}\n    lp.setupi 0, {iterations}, body_end\nbody:\n    \
         p.lw x7, 4(x5!)\n    p.lw x8, 4(x6!)\n    pv.sdotusp.b x9, x7, x8\nbody_end:\n    halt\n",
        a = TCDM_BASE,
        b = TCDM_BASE + 4 * iterations,
    );
    let img = assemble(&src)?;
    let (lo, hi) = (img.symbol("body").unwrap(), img.symbol("body_end").unwrap());
    let program = Arc::new(Program::from_image(&img));
    let stat_mix: Vec<_> = (lo..hi)
        .step_by(4)
        .map(|pc| decode(program.words()[((pc - program.base()) / 4) as usize]).expect("decodes").class())
        .collect();
    let static_opef = stat_mix.iter().filter(|c| c.is_mac()).count() as f64 / stat_mix.len() as f64;
    let (cluster, _) = run_parallel(ClusterConfig::with_cores(1, 16), program, |_| Ok(()), None, 1 << 24)?;
    let s = profile_range(&cluster.cores()[0], lo, hi);
    Ok((static_opef, s.mac_retired as f64 / s.retired.max(1) as f64))
}

/// In-place ReLU over `words` words of packed signed `bits`-bit data at
/// `addr`, one `pv.max.sc` against zero per word.
pub fn relu_source(addr: u32, words: u32, bits: u32) -> Result<String, KernelError> {
    let fmt = match bits {
        4 => "n",
        2 => "c",
        b => return Err(KernelError::Geometry(format!("vector max exists for 4- and 2-bit lanes, not {b}-bit"))),
    };
    if words == 0 || words > 4095 {
        return Err(KernelError::Resource(format!("{words} words outside the loop count range")));
    }
    Ok(format!(
        "_start:\n    li x5, 0x{addr:08x}\n    mv x6, x5\n    lp.setupi 0, {words}, relu_end\n    \
         p.lw x7, 4(x5!)\n    pv.max.sc.{fmt} x7, x7, x0\n    p.sw x7, 4(x6!)\nrelu_end:\n    halt\n"
    ))
}

// ---------------------------------------------------------------------------
// code generation

struct Gen {
    s: String,
}

macro_rules! emit {
    ($g:expr, $($t:tt)*) => {{
        let _ = writeln!($g.s, "    {}", format_args!($($t)*));
    }};
}

impl Gen {
    fn label(&mut self, l: &str) {
        let _ = writeln!(self.s, "{l}:");
    }

    /// `rd = rs + imm`, through `tmp` when `imm` exceeds 12 bits.
    fn addi(&mut self, rd: u8, rs: u8, imm: i32, tmp: u8) {
        if (-2048..=2047).contains(&imm) {
            emit!(self, "addi x{rd}, x{rs}, {imm}");
        } else {
            emit!(self, "li x{tmp}, {imm}");
            emit!(self, "add x{rd}, x{rs}, x{tmp}");
        }
    }

    fn li(&mut self, rd: u8, v: u32) {
        emit!(self, "li x{rd}, 0x{v:x}");
    }
}

/// Registers a variant keeps live across the channel-group loop, plus the
/// scratch set its requantization tail may clobber.
struct Regs {
    row0: u8,
    cnt: u8,
    out: u8,
    par: u8,
    xbuf: u8,
    tail: Tail,
}

#[derive(Clone, Copy)]
struct Tail {
    k: u8,
    l: u8,
    m: u8,
    hi: u8,
    lo: u8,
    tmp: u8,
    max: u8,
    lim: u8,
}

fn regs(v: Variant) -> Regs {
    match v {
        Variant::Simd4x2 => Regs {
            row0: 11,
            cnt: 24,
            out: 21,
            par: 22,
            xbuf: 23,
            tail: Tail { k: 25, l: 26, m: 27, hi: 28, lo: 29, tmp: 30, max: 24, lim: 15 },
        },
        Variant::Cu4x2 => Regs {
            row0: 9,
            cnt: 24,
            out: 21,
            par: 22,
            xbuf: 23,
            tail: Tail { k: 24, l: 25, m: 26, hi: 27, lo: 28, tmp: 29, max: 30, lim: 19 },
        },
        Variant::Nn4x2 => Regs {
            row0: 9,
            cnt: 24,
            out: 21,
            par: 22,
            xbuf: 23,
            tail: Tail { k: 24, l: 25, m: 26, hi: 27, lo: 28, tmp: 29, max: 30, lim: 13 },
        },
        Variant::Nn4x4 => Regs {
            row0: 17,
            cnt: 28,
            out: 25,
            par: 26,
            xbuf: 27,
            tail: Tail { k: 18, l: 19, m: 20, hi: 21, lo: 22, tmp: 23, max: 24, lim: 28 },
        },
        Variant::Unpack4x2 => Regs {
            row0: 11,
            cnt: 18,
            out: 15,
            par: 16,
            xbuf: 17,
            tail: Tail { k: 18, l: 19, m: 20, hi: 21, lo: 22, tmp: 23, max: 24, lim: 25 },
        },
    }
}

/// Accumulator register for output channel `c` and pixel `p`.
fn acc(v: Variant, c: usize, p: usize) -> u8 {
    (1 + c * v.pixels() + p) as u8
}

fn generate(v: Variant, g: &ConvGeometry, d: &Dims, l: &TcdmLayout) -> String {
    let mut o = Gen { s: String::new() };
    let r = regs(v);
    let pblk = v.pixels();

    let _ = writeln!(o.s, "// {} {}-bit conv {}x{}x{} -> {}x{}x{}", v, d.bits, g.h_in, g.w_in, g.c_in, g.h_out(), g.w_out(), g.c_out);
    o.s.push_str(".global _start\n");
    let _ = writeln!(o.s, ".org 0x{:08x}", crate::core_sim::CODE_BASE);
    o.label("_start");
    // x31: per-core context {row, px, n_cores, im2col base}
    o.li(31, l.ctx);
    emit!(o, "slli x5, x10, 4");
    emit!(o, "add x31, x31, x5");
    o.li(6, l.buffers);
    o.li(5, l.buffer_stride);
    emit!(o, "mul x5, x10, x5");
    emit!(o, "add x6, x6, x5");
    emit!(o, "sw x6, 12(x31)");
    emit!(o, "sw x11, 8(x31)");
    emit!(o, "sw x10, 0(x31)");
    o.label("row_loop");
    emit!(o, "lw x8, 0(x31)");
    emit!(o, "li x5, {}", g.h_out());
    emit!(o, "bge x8, x5, done");
    emit!(o, "sw x0, 4(x31)");
    o.label("px_loop");

    im2col(&mut o, g, d, l, pblk);

    // output and parameter pointers for this pixel block
    emit!(o, "lw x5, 0(x31)");
    emit!(o, "lw x6, 4(x31)");
    emit!(o, "li x7, {}", g.w_out());
    emit!(o, "mul x5, x5, x7");
    emit!(o, "add x5, x5, x6");
    emit!(o, "li x7, {}", d.pixb);
    emit!(o, "mul x5, x5, x7");
    o.li(r.out, l.output);
    emit!(o, "add x{}, x{}, x5", r.out, r.out);
    o.li(r.par, l.params);
    emit!(o, "lw x{}, 12(x31)", r.xbuf);

    o.label("mm_begin");
    o.li(r.row0, l.weights);
    emit!(o, "li x{}, {}", r.cnt, g.c_out / 4);
    emit!(o, "lp.setup 1, x{}, grp_end", r.cnt);
    match v {
        Variant::Simd4x2 => simd_4x2(&mut o, d),
        Variant::Cu4x2 => cu_4x2(&mut o, d),
        Variant::Nn4x2 => nn_4x2(&mut o, d),
        Variant::Nn4x4 => nn_4x4(&mut o, d),
        Variant::Unpack4x2 => unpack_4x2(&mut o, d),
    }
    o.label("rq_begin");
    requant(&mut o, v, d, &r);
    o.label("grp_end");

    emit!(o, "lw x5, 4(x31)");
    emit!(o, "addi x5, x5, {pblk}");
    emit!(o, "sw x5, 4(x31)");
    emit!(o, "li x6, {}", g.w_out());
    emit!(o, "blt x5, x6, px_loop");
    emit!(o, "lw x5, 0(x31)");
    emit!(o, "lw x6, 8(x31)");
    emit!(o, "add x5, x5, x6");
    emit!(o, "sw x5, 0(x31)");
    emit!(o, "j row_loop");
    o.label("done");
    emit!(o, "barrier");
    emit!(o, "halt");
    o.s
}

/// Gathers the receptive fields of `pblk` consecutive output pixels into
/// contiguous im2col rows, zero-filling taps that fall in the padding.
fn im2col(o: &mut Gen, g: &ConvGeometry, d: &Dims, l: &TcdmLayout, pblk: usize) {
    let (f, s, pad) = (g.f as i32, g.stride as i32, g.pad as i32);
    let row_words = d.tw * g.f as u32;
    o.label("im_begin");
    emit!(o, "lw x8, 0(x31)");
    emit!(o, "lw x9, 4(x31)");
    emit!(o, "lw x12, 12(x31)");
    if s != 1 {
        emit!(o, "li x5, {s}");
        emit!(o, "mul x8, x8, x5");
        emit!(o, "mul x9, x9, x5");
    }
    if pad != 0 {
        emit!(o, "addi x8, x8, {}", -pad);
        emit!(o, "addi x9, x9, {}", -pad);
    }
    emit!(o, "li x14, {}", g.h_in);
    emit!(o, "li x15, {}", g.w_in);
    o.li(16, l.input);
    o.li(17, d.rowb);
    o.li(18, d.cb);
    emit!(o, "li x19, {pblk}");
    o.label("im_pix");
    emit!(o, "mv x20, x8");
    emit!(o, "li x21, {f}");
    o.label("im_fy");
    emit!(o, "bgeu x20, x14, im_zrow");
    emit!(o, "blt x9, x0, im_slow");
    emit!(o, "addi x5, x9, {}", f - 1);
    emit!(o, "bgeu x5, x15, im_slow");
    emit!(o, "mul x6, x20, x17");
    emit!(o, "mul x7, x9, x18");
    emit!(o, "add x6, x6, x7");
    emit!(o, "add x6, x6, x16");
    emit!(o, "lp.setupi 0, {row_words}, im_cp_end");
    emit!(o, "p.lw x5, 4(x6!)");
    emit!(o, "p.sw x5, 4(x12!)");
    o.label("im_cp_end");
    emit!(o, "j im_next");
    o.label("im_zrow");
    emit!(o, "lp.setupi 0, {row_words}, im_z_end");
    emit!(o, "p.sw x0, 4(x12!)");
    o.label("im_z_end");
    emit!(o, "j im_next");
    o.label("im_slow");
    for fx in 0..f {
        emit!(o, "addi x22, x9, {fx}");
        emit!(o, "bgeu x22, x15, im_zt{fx}");
        emit!(o, "mul x6, x20, x17");
        emit!(o, "mul x7, x22, x18");
        emit!(o, "add x6, x6, x7");
        emit!(o, "add x6, x6, x16");
        emit!(o, "lp.setupi 0, {}, im_ct{fx}_end", d.tw);
        emit!(o, "p.lw x5, 4(x6!)");
        emit!(o, "p.sw x5, 4(x12!)");
        o.label(&format!("im_ct{fx}_end"));
        emit!(o, "j im_t{fx}_done");
        o.label(&format!("im_zt{fx}"));
        emit!(o, "lp.setupi 0, {}, im_zt{fx}_end", d.tw);
        emit!(o, "p.sw x0, 4(x12!)");
        o.label(&format!("im_zt{fx}_end"));
        o.label(&format!("im_t{fx}_done"));
    }
    o.label("im_next");
    emit!(o, "addi x20, x20, 1");
    emit!(o, "addi x21, x21, -1");
    emit!(o, "bnez x21, im_fy");
    emit!(o, "addi x9, x9, {s}");
    emit!(o, "addi x19, x19, -1");
    emit!(o, "bnez x19, im_pix");
    o.label("im_end");
}

fn zero_accs(o: &mut Gen, v: Variant) {
    for c in 0..4 {
        for p in 0..v.pixels() {
            emit!(o, "mv x{}, x0", acc(v, c, p));
        }
    }
}

// Register maps per variant are fixed by `regs`; the generators below use
// the same numbers.

fn simd_4x2(o: &mut Gen, d: &Dims) {
    let v = Variant::Simd4x2;
    let f = d.fmt();
    for i in 1..4 {
        o.addi(11 + i, 11, i as i32 * d.kwb, 1);
    }
    emit!(o, "mv x9, x23");
    o.addi(10, 23, d.kwb, 1);
    zero_accs(o, v);
    emit!(o, "lp.setupi 0, {}, inner_end", d.kw);
    o.label("inner_begin");
    emit!(o, "p.lw x15, 4(x9!)");
    emit!(o, "p.lw x16, 4(x10!)");
    for c in 0..4usize {
        let w = 17 + c;
        emit!(o, "p.lw x{w}, 4(x{}!)", 11 + c);
        emit!(o, "pv.sdotusp.{f} x{}, x15, x{w}", acc(v, c, 0));
        emit!(o, "pv.sdotusp.{f} x{}, x16, x{w}", acc(v, c, 1));
    }
    o.label("inner_end");
    emit!(o, "mv x11, x14");
}

fn cu_4x2(o: &mut Gen, d: &Dims) {
    let v = Variant::Cu4x2;
    let f = d.fmt();
    // x9..x12 re-read the current weight word, x13..x16 fetch the next one
    for i in 1..4 {
        o.addi(9 + i, 9, i as i32 * d.kwb, 1);
    }
    for i in 0..4 {
        emit!(o, "mv x{}, x{}", 13 + i, 9 + i);
    }
    for i in 0..4 {
        emit!(o, "nn.lw.w{i} 4(x{}!)", 13 + i);
    }
    emit!(o, "mv x17, x23");
    o.addi(18, 23, d.kwb, 1);
    zero_accs(o, v);
    emit!(o, "lp.setupi 0, {}, inner_end", d.kw);
    o.label("inner_begin");
    emit!(o, "p.lw x19, 4(x17!)");
    emit!(o, "p.lw x20, 4(x18!)");
    for c in 0..4usize {
        emit!(o, "pv.cusdotusp.{f}.{c} x{}, x{}, x19", acc(v, c, 0), 9 + c);
        emit!(o, "pv.cusdotusp.{f}.{c} x{}, x{}, x20", acc(v, c, 1), 13 + c);
    }
    o.label("inner_end");
    emit!(o, "mv x9, x12");
}

fn nn_4x2(o: &mut Gen, d: &Dims) {
    let v = Variant::Nn4x2;
    let f = d.fmt();
    for i in 1..4 {
        o.addi(9 + i, 9, i as i32 * d.kwb, 1);
    }
    emit!(o, "mv x13, x23");
    o.addi(14, 23, d.kwb, 1);
    zero_accs(o, v);
    for i in 0..4 {
        emit!(o, "nn.lw.w{i} 4(x{}!)", 9 + i);
    }
    emit!(o, "nn.lw.a0 4(x13!)");
    emit!(o, "nn.lw.a1 4(x14!)");
    emit!(o, "lp.setupi 0, {}, inner_end", d.kw);
    o.label("inner_begin");
    for c in 0..4usize {
        let a0 = acc(v, c, 0);
        let a1 = acc(v, c, 1);
        if c == 3 {
            emit!(o, "pv.nnsdotusp.{f} x{a0}, x13, a0, w{c}, upd=a");
        } else {
            emit!(o, "pv.nnsdotusp.{f} x{a0}, x0, a0, w{c}");
        }
        emit!(o, "pv.nnsdotusp.{f} x{a1}, x{}, a1, w{c}, upd=w", 9 + c);
    }
    emit!(o, "nn.lw.a1 4(x14!)");
    o.label("inner_end");
    emit!(o, "addi x9, x12, -4");
}

fn nn_4x4(o: &mut Gen, d: &Dims) {
    let v = Variant::Nn4x4;
    let f = d.fmt();
    for i in 1..4 {
        o.addi(17 + i, 17, i as i32 * d.kwb, 1);
    }
    emit!(o, "mv x21, x27");
    for p in 1..4 {
        o.addi(21 + p, 27, p as i32 * d.kwb, 1);
    }
    zero_accs(o, v);
    for i in 0..4 {
        emit!(o, "nn.lw.w{i} 4(x{}!)", 17 + i);
    }
    emit!(o, "nn.lw.a0 4(x21!)");
    emit!(o, "nn.lw.a1 4(x22!)");
    emit!(o, "lp.setupi 0, {}, inner_end", d.kw);
    o.label("inner_begin");
    // pixels 0 and 1; the last pair swaps in pixels 2 and 3
    for c in 0..4usize {
        if c == 3 {
            emit!(o, "pv.nnsdotusp.{f} x{}, x23, a0, w3, upd=a", acc(v, 3, 0));
            emit!(o, "pv.nnsdotusp.{f} x{}, x24, a1, w3, upd=a", acc(v, 3, 1));
        } else {
            emit!(o, "pv.nnsdotusp.{f} x{}, x0, a0, w{c}", acc(v, c, 0));
            emit!(o, "pv.nnsdotusp.{f} x{}, x0, a1, w{c}", acc(v, c, 1));
        }
    }
    // pixels 2 and 3; weights advance, pixel 0 comes back for the next word
    for c in 0..4usize {
        if c == 3 {
            emit!(o, "pv.nnsdotusp.{f} x{}, x21, a0, w3, upd=a", acc(v, 3, 2));
        } else {
            emit!(o, "pv.nnsdotusp.{f} x{}, x0, a0, w{c}", acc(v, c, 2));
        }
        emit!(o, "pv.nnsdotusp.{f} x{}, x{}, a1, w{c}, upd=w", acc(v, c, 3), 17 + c);
    }
    emit!(o, "nn.lw.a1 4(x22!)");
    o.label("inner_end");
    emit!(o, "addi x17, x20, -4");
}

fn unpack_4x2(o: &mut Gen, d: &Dims) {
    let v = Variant::Unpack4x2;
    let bits = d.bits;
    let parts = (8 / bits) as u8;
    let u0 = 20u8;
    let u1 = 20 + parts;
    let wp = 20 + 2 * parts;
    let t = wp + 1;
    let e = wp + 2;
    for i in 1..4 {
        o.addi(11 + i, 11, i as i32 * d.kwb, 1);
    }
    emit!(o, "mv x9, x17");
    o.addi(10, 17, d.kwb, 1);
    zero_accs(o, v);
    emit!(o, "lp.setupi 0, {}, inner_end", d.kw);
    o.label("inner_begin");
    emit!(o, "p.lw x18, 4(x9!)");
    emit!(o, "p.lw x19, 4(x10!)");
    let widen = |o: &mut Gen, dst: u8, src: u8, k: u32, signed: bool| {
        let ext = if signed { "p.extract" } else { "p.extractu" };
        emit!(o, "{ext} x{dst}, x{src}, {bits}, {}", 4 * k * bits);
        for lane in 1..4 {
            emit!(o, "{ext} x{e}, x{src}, {bits}, {}", (4 * k + lane) * bits);
            emit!(o, "p.insert x{dst}, x{e}, 8, {}", 8 * lane);
        }
    };
    for k in 0..parts {
        widen(o, u0 + k, 18, k as u32, false);
        widen(o, u1 + k, 19, k as u32, false);
    }
    for c in 0..4usize {
        emit!(o, "p.lw x{wp}, 4(x{}!)", 11 + c);
        for k in 0..parts {
            widen(o, t, wp, k as u32, true);
            emit!(o, "pv.sdotusp.b x{}, x{}, x{t}", acc(v, c, 0), u0 + k);
            emit!(o, "pv.sdotusp.b x{}, x{}, x{t}", acc(v, c, 1), u1 + k);
        }
    }
    o.label("inner_end");
    emit!(o, "mv x11, x14");
}

/// `clip((m·max(κ·φ+λ, 0)) >> d, 0, 2^N-1)` with the product kept to 64
/// bits, packed four channels per store.
fn requant(o: &mut Gen, v: Variant, d: &Dims, r: &Regs) {
    let Tail { k, l, m, hi, lo, tmp, max, lim } = r.tail;
    let bits = d.bits;
    let sh = d.shift;
    emit!(o, "li x{max}, {}", (1u32 << bits) - 1);
    let lim = if sh > 0 {
        o.li(lim, (1u32 << sh) - 1);
        lim
    } else {
        0
    };
    for c in 0..4 {
        emit!(o, "p.lw x{k}, 4(x{}!)", r.par);
        emit!(o, "p.lw x{l}, 4(x{}!)", r.par);
        emit!(o, "p.lw x{m}, 4(x{}!)", r.par);
        for p in 0..v.pixels() {
            let a = acc(v, c, p);
            emit!(o, "mul x{a}, x{a}, x{k}");
            emit!(o, "add x{a}, x{a}, x{l}");
            emit!(o, "p.max x{a}, x{a}, x0");
            emit!(o, "mulhu x{hi}, x{a}, x{m}");
            emit!(o, "mul x{lo}, x{a}, x{m}");
            if sh > 0 {
                emit!(o, "srli x{lo}, x{lo}, {sh}");
                emit!(o, "slli x{tmp}, x{hi}, {}", 32 - sh);
                emit!(o, "or x{lo}, x{lo}, x{tmp}");
            }
            emit!(o, "sltu x{tmp}, x{lim}, x{hi}");
            emit!(o, "sub x{tmp}, x0, x{tmp}");
            emit!(o, "or x{lo}, x{lo}, x{tmp}");
            let pack = acc(v, 0, p);
            if c == 0 {
                emit!(o, "p.minu x{pack}, x{lo}, x{max}");
            } else {
                emit!(o, "p.minu x{lo}, x{lo}, x{max}");
                emit!(o, "p.insert x{pack}, x{lo}, {bits}, {}", c as u32 * bits);
            }
        }
    }
    let store = match bits {
        8 => "sw",
        4 => "sh",
        _ => "sb",
    };
    for p in 0..v.pixels() {
        emit!(o, "{store} x{}, {}(x{})", acc(v, 0, p), p as i32 * d.pixb, r.out);
    }
    emit!(o, "addi x{}, x{}, {}", r.out, r.out, bits / 2);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(v: Variant, bits: u32, geom: ConvGeometry, cores: usize) -> LayerRun {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = LayerData::random(geom, bits, 12, &mut rng).unwrap();
        let plan = KernelPlan::new(v, bits, geom, cores, 12).unwrap();
        let run = plan.run(&data, 16, 1 << 26).unwrap();
        assert_eq!(run.output, data.golden().unwrap(), "{v} {bits}-bit mismatch");
        run
    }

    #[test]
    fn every_variant_matches_golden_small() {
        let geom = ConvGeometry::same(4, 4, 32, 8, 3);
        for v in Variant::ALL {
            for bits in [8, 4, 2] {
                if v.supports(bits) {
                    check(v, bits, geom, 1);
                }
            }
        }
    }

    #[test]
    fn multicore_matches_golden() {
        let geom = ConvGeometry::same(6, 4, 16, 8, 3);
        check(Variant::Nn4x4, 4, geom, 4);
        check(Variant::Simd4x2, 8, geom, 3);
    }

    #[test]
    fn static_opef_per_variant() {
        let geom = ConvGeometry::same(4, 4, 32, 8, 3);
        let opef = |v, b| KernelPlan::new(v, b, geom, 1, 8).unwrap().static_opef();
        assert!((opef(Variant::Simd4x2, 8) - 8.0 / 14.0).abs() < 1e-12);
        assert!((opef(Variant::Cu4x2, 8) - 0.8).abs() < 1e-12);
        assert!((opef(Variant::Nn4x2, 4) - 8.0 / 9.0).abs() < 1e-12);
        assert!((opef(Variant::Nn4x4, 2) - 16.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_errors() {
        let bad_cout = ConvGeometry::same(4, 4, 32, 6, 3);
        assert!(matches!(KernelPlan::new(Variant::Nn4x4, 8, bad_cout, 1, 8), Err(KernelError::Geometry(_))));
        let bad_cin = ConvGeometry::same(4, 4, 8, 8, 3);
        assert!(matches!(KernelPlan::new(Variant::Nn4x2, 2, bad_cin, 1, 8), Err(KernelError::Geometry(_))));
        let bad_w = ConvGeometry::same(4, 6, 32, 8, 3);
        assert!(matches!(KernelPlan::new(Variant::Nn4x4, 8, bad_w, 1, 8), Err(KernelError::Geometry(_))));
        let huge = ConvGeometry::same(64, 64, 64, 64, 3);
        assert!(matches!(KernelPlan::new(Variant::Nn4x4, 8, huge, 8, 8), Err(KernelError::Capacity { .. })));
        assert!(matches!(KernelPlan::new(Variant::Unpack4x2, 8, bad_cout, 1, 8), Err(KernelError::Geometry(_))));
    }

    #[test]
    fn params_are_checked() {
        let geom = ConvGeometry::same(4, 4, 32, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data = LayerData::random(geom, 8, 12, &mut rng).unwrap();
        let plan = KernelPlan::new(Variant::Nn4x2, 8, geom, 1, 12).unwrap();
        data.params[3].m = -1;
        assert!(matches!(plan.run(&data, 16, 1 << 24), Err(KernelError::Params(_))));
        data.params[3].m = 1;
        data.params[5].d = 3;
        assert!(matches!(plan.run(&data, 16, 1 << 24), Err(KernelError::Params(_))));
    }

    #[test]
    fn relu_clears_negative_lanes() {
        use crate::quant::{pack, unpack};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [4, 2] {
            let (lo, hi) = int_range(bits, true);
            let vals: Vec<i32> = (0..64 * 32 / bits as usize).map(|_| rng.gen_range(lo..=hi)).collect();
            let bytes = pack(&vals, bits, true).unwrap();
            let img = assemble(&relu_source(TCDM_BASE, 64, bits).unwrap()).unwrap();
            let (mut cl, _) = run_parallel(
                ClusterConfig::with_cores(1, 16),
                Arc::new(Program::from_image(&img)),
                |t| t.write_bytes(TCDM_BASE, &bytes),
                None,
                1 << 16,
            )
            .unwrap();
            let out = unpack(&cl.tcdm_mut().read_bytes(TCDM_BASE, bytes.len()).unwrap(), bits, true, vals.len());
            assert_eq!(out, vals.iter().map(|&v| v.max(0)).collect::<Vec<_>>());
        }
        assert!(relu_source(TCDM_BASE, 4, 8).is_err());
    }

    #[test]
    fn load_load_mac_bound() {
        let (s, d) = load_load_mac_opef(64).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
        assert!((d - 1.0 / 3.0).abs() < 1e-12);
    }
}
