//! Two-pass assembler, disassembler and the textual image format.
//!
//! Source syntax: one statement per line, `#` or `//` comments, labels as
//! `name:`. Registers are `x0`–`x31` or ABI names. Numbers are decimal,
//! `0x` hex or `0b` binary. Branch and jump targets are labels or absolute
//! addresses. Directives: `.org`, `.word`, `.space`, `.global`. Pseudo
//! instructions: `nop`, `mv`, `li`, `la`, `j`, `ret`, `beqz`, `bnez`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::core_sim::CODE_BASE;
use crate::isa::{
    self, BranchCond, ImmOp, Instruction, IsaError, LoadWidth, LoopOp, NnImm, NnReg, NnUpdate, RegOp, Signedness,
    SimdFormat, StoreWidth, VecOp,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: {msg}")]
    Range { line: usize, msg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: undefined symbol `{name}`")]
    UndefinedSymbol { line: usize, name: String },
    #[error("sections at {a:#010x} and {b:#010x} overlap")]
    Overlap { a: u32, b: u32 },
    #[error("illegal instruction at {address:#010x}: {source}")]
    IllegalInstruction { address: u32, source: IsaError },
    #[error("image line {line}: {msg}")]
    Image { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub base: u32,
    pub words: Vec<u32>,
}

impl Section {
    pub fn end(&self) -> u32 {
        self.base + 4 * self.words.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProgramImage {
    pub sections: Vec<Section>,
    pub entry: u32,
    pub symbols: BTreeMap<String, u32>,
}

impl ProgramImage {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Text image: `@<hexaddr>` markers followed by one word per line.
    pub fn to_hex(&self) -> String {
        format_hex(&self.sections, Some(self.entry))
    }

    pub fn from_hex(text: &str) -> Result<Self, AsmError> {
        let (sections, entry) = parse_hex(text)?;
        let entry = entry.or_else(|| sections.first().map(|s| s.base)).unwrap_or(CODE_BASE);
        Ok(ProgramImage { sections, entry, symbols: BTreeMap::new() })
    }

    /// Same sections and entry point; symbols are not part of the identity.
    pub fn same_contents(&self, other: &ProgramImage) -> bool {
        self.sections == other.sections && self.entry == other.entry
    }
}

/// Renders sections in the image text format. Also used for memory dumps.
pub fn format_hex(sections: &[Section], entry: Option<u32>) -> String {
    let mut out = String::new();
    if let Some(e) = entry {
        let _ = writeln!(out, "// entry {e:#010x}");
    }
    for s in sections {
        let _ = writeln!(out, "@{:08x}", s.base);
        for w in &s.words {
            let _ = writeln!(out, "{w:08x}");
        }
    }
    out
}

/// Parses the image text format; returns the sections and the entry hint.
pub fn parse_hex(text: &str) -> Result<(Vec<Section>, Option<u32>), AsmError> {
    let mut sections: Vec<Section> = Vec::new();
    let mut entry = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let (body, comment) = match raw.find("//") {
            Some(p) => (&raw[..p], Some(raw[p + 2..].trim())),
            None => (raw, None),
        };
        if let Some(c) = comment {
            if let Some(rest) = c.strip_prefix("entry") {
                let v = parse_number(rest.trim()).ok_or_else(|| AsmError::Image { line, msg: "bad entry address".into() })?;
                entry = Some(v as u32);
            }
        }
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        if let Some(addr) = body.strip_prefix('@') {
            let base = u32::from_str_radix(addr, 16).map_err(|_| AsmError::Image { line, msg: format!("bad address `{addr}`") })?;
            if base % 4 != 0 {
                return Err(AsmError::Image { line, msg: "unaligned section address".into() });
            }
            sections.push(Section { base, words: Vec::new() });
            continue;
        }
        if body.len() != 8 {
            return Err(AsmError::Image { line, msg: format!("expected 8 hex digits, got `{body}`") });
        }
        let w = u32::from_str_radix(body, 16).map_err(|_| AsmError::Image { line, msg: format!("bad word `{body}`") })?;
        match sections.last_mut() {
            Some(s) => s.words.push(w),
            None => return Err(AsmError::Image { line, msg: "word before any @address marker".into() }),
        }
    }
    Ok((sections, entry))
}

// ---------------------------------------------------------------------------
// lexical helpers

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b").or_else(|| body.strip_prefix("0B")) {
        i64::from_str_radix(&b.replace('_', ""), 2).ok()?
    } else if body.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        body.replace('_', "").parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7",
    "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
];

pub fn parse_reg(s: &str) -> Option<u8> {
    let s = s.trim();
    if let Some(n) = s.strip_prefix('x') {
        if let Ok(v) = n.parse::<u8>() {
            if v < 32 && !n.starts_with('+') && (n == "0" || !n.starts_with('0')) {
                return Some(v);
            }
        }
    }
    if s == "fp" {
        return Some(8);
    }
    ABI_NAMES.iter().position(|&n| n == s).map(|i| i as u8)
}

fn is_symbol(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

/// Splits an operand list on top-level commas.
fn split_operands(s: &str) -> Vec<String> {
    let s = s.trim();
    if s.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    out.push(cur.trim().to_string());
    out
}

fn strip_comment(line: &str) -> &str {
    let mut end = line.len();
    if let Some(p) = line.find('#') {
        end = end.min(p);
    }
    if let Some(p) = line.find("//") {
        end = end.min(p);
    }
    &line[..end]
}

// ---------------------------------------------------------------------------
// expressions

struct Ctx<'a> {
    symbols: &'a BTreeMap<String, u32>,
    line: usize,
    /// Pass 1 tolerates undefined symbols (they evaluate to 0).
    lenient: bool,
}

impl Ctx<'_> {
    fn syntax(&self, msg: impl Into<String>) -> AsmError {
        AsmError::Syntax { line: self.line, msg: msg.into() }
    }

    fn range(&self, msg: impl Into<String>) -> AsmError {
        AsmError::Range { line: self.line, msg: msg.into() }
    }

    fn eval(&self, s: &str) -> Result<i64, AsmError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(self.syntax("missing expression"));
        }
        // split into signed terms at top level
        let mut terms: Vec<(bool, String)> = Vec::new();
        let mut depth = 0;
        let mut cur = String::new();
        let mut neg = false;
        for (i, c) in s.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                _ => {}
            }
            if depth == 0 && (c == '+' || c == '-') && i > 0 && !cur.trim().is_empty() {
                terms.push((neg, std::mem::take(&mut cur)));
                neg = c == '-';
                continue;
            }
            if depth == 0 && (c == '+' || c == '-') && cur.trim().is_empty() {
                if c == '-' {
                    neg = !neg;
                }
                continue;
            }
            cur.push(c);
        }
        terms.push((neg, cur));
        let mut total: i64 = 0;
        for (neg, t) in terms {
            let v = self.term(t.trim())?;
            total = if neg { total - v } else { total + v };
        }
        Ok(total)
    }

    fn term(&self, t: &str) -> Result<i64, AsmError> {
        if let Some(inner) = t.strip_prefix("%hi(").and_then(|r| r.strip_suffix(')')) {
            let v = self.eval(inner)? as u32;
            return Ok((v.wrapping_add(0x800) >> 12) as i64);
        }
        if let Some(inner) = t.strip_prefix("%lo(").and_then(|r| r.strip_suffix(')')) {
            let v = self.eval(inner)? as u32;
            return Ok(((v << 20) as i32 >> 20) as i64);
        }
        if let Some(v) = parse_number(t) {
            return Ok(v);
        }
        if is_symbol(t) {
            return match self.symbols.get(t) {
                Some(&v) => Ok(v as i64),
                None if self.lenient => Ok(0),
                None => Err(AsmError::UndefinedSymbol { line: self.line, name: t.to_string() }),
            };
        }
        Err(self.syntax(format!("bad expression `{t}`")))
    }

    fn reg(&self, s: &str) -> Result<u8, AsmError> {
        parse_reg(s).ok_or_else(|| self.syntax(format!("expected register, got `{s}`")))
    }

    fn imm_in(&self, s: &str, lo: i64, hi: i64, what: &str) -> Result<i64, AsmError> {
        let v = self.eval(s)?;
        if self.lenient || (lo..=hi).contains(&v) {
            Ok(v)
        } else {
            Err(self.range(format!("{what} {v} outside [{lo}, {hi}]")))
        }
    }

    /// `offset(reg)` or `offset(reg!)`; returns (offset, reg, post-increment).
    fn mem(&self, s: &str) -> Result<(i32, u8, bool), AsmError> {
        let s = s.trim();
        let open = s.rfind('(').ok_or_else(|| self.syntax(format!("expected offset(reg), got `{s}`")))?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(|| self.syntax("missing `)`"))?.trim();
        let (reg, post) = match inner.strip_suffix('!') {
            Some(r) => (r.trim(), true),
            None => (inner, false),
        };
        let off_s = s[..open].trim();
        let off = if off_s.is_empty() { 0 } else { self.imm_in(off_s, -2048, 2047, "offset")? };
        Ok((off as i32, self.reg(reg)?, post))
    }

    /// PC-relative offset to a target expression, checked for `bits` range.
    fn target(&self, s: &str, pc: u32, bits: u32) -> Result<i32, AsmError> {
        let t = self.eval(s)?;
        let off = t - pc as i64;
        if self.lenient {
            return Ok(0);
        }
        let lim = 1i64 << (bits - 1);
        if off % 2 != 0 || off < -lim || off >= lim {
            return Err(self.range(format!("target {t:#x} out of range from {pc:#x}")));
        }
        Ok(off as i32)
    }

    /// Forward word offset for hardware-loop targets.
    fn loop_target(&self, s: &str, pc: u32, max: u16) -> Result<u16, AsmError> {
        let t = self.eval(s)?;
        if self.lenient {
            return Ok(0);
        }
        let off = t - pc as i64;
        if off < 0 || off % 4 != 0 || off / 4 > max as i64 {
            return Err(self.range(format!("loop target {t:#x} out of range from {pc:#x}")));
        }
        Ok((off / 4) as u16)
    }
}

// ---------------------------------------------------------------------------
// assembler

enum Item {
    Instr { line: usize, addr: u32, mnemonic: String, ops: Vec<String> },
    Word { line: usize, expr: String },
}

struct PendingSection {
    base: u32,
    line: usize,
    items: Vec<Item>,
    size: u32,
}

/// Number of words a statement occupies. Only `li` depends on its operand.
fn statement_words(mnemonic: &str, ops: &[String]) -> u32 {
    match mnemonic {
        "la" => 2,
        "li" => match ops.get(1).and_then(|o| parse_number(o)) {
            Some(v) if (-2048..2048).contains(&v) => 1,
            _ => 2,
        },
        _ => 1,
    }
}

pub fn assemble(src: &str) -> Result<ProgramImage, AsmError> {
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
    let mut sections: Vec<PendingSection> = Vec::new();
    let mut cur = PendingSection { base: CODE_BASE, line: 0, items: Vec::new(), size: 0 };
    let mut globals = Vec::new();

    // pass 1: layout and labels
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let mut text = strip_comment(raw).trim();
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if !is_symbol(label) {
                break;
            }
            let addr = cur.base + 4 * cur.size;
            if symbols.insert(label.to_string(), addr).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: label.to_string() });
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let ctx = Ctx { symbols: &symbols, line, lenient: true };
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        let ops = split_operands(rest);
        match head {
            ".org" => {
                let [a] = ops.as_slice() else { return Err(ctx.syntax(".org takes one address")) };
                let strict = Ctx { lenient: false, ..ctx };
                let addr = strict.eval(a)?;
                if addr < 0 || addr > u32::MAX as i64 || addr % 4 != 0 {
                    return Err(strict.range(format!(".org address {addr:#x} invalid")));
                }
                let next = PendingSection { base: addr as u32, line, items: Vec::new(), size: 0 };
                let done = std::mem::replace(&mut cur, next);
                if done.size > 0 || !done.items.is_empty() {
                    sections.push(done);
                }
            }
            ".word" => {
                if ops.is_empty() {
                    return Err(ctx.syntax(".word needs a value"));
                }
                for o in ops {
                    cur.items.push(Item::Word { line, expr: o });
                    cur.size += 1;
                }
            }
            ".space" => {
                let [n] = ops.as_slice() else { return Err(ctx.syntax(".space takes a byte count")) };
                let n = Ctx { lenient: false, ..ctx }.eval(n)?;
                if n < 0 || n % 4 != 0 {
                    return Err(ctx.range(".space size must be a non-negative multiple of 4"));
                }
                for _ in 0..n / 4 {
                    cur.items.push(Item::Word { line, expr: "0".into() });
                    cur.size += 1;
                }
            }
            ".global" | ".globl" => {
                let [name] = ops.as_slice() else { return Err(ctx.syntax(".global takes one symbol")) };
                globals.push((line, name.clone()));
            }
            d if d.starts_with('.') => return Err(ctx.syntax(format!("unknown directive `{d}`"))),
            m => {
                let n = statement_words(m, &ops);
                let addr = cur.base + 4 * cur.size;
                cur.items.push(Item::Instr { line, addr, mnemonic: m.to_string(), ops });
                cur.size += n;
            }
        }
    }
    if cur.size > 0 || !cur.items.is_empty() || sections.is_empty() {
        sections.push(cur);
    }
    for (line, name) in &globals {
        if !symbols.contains_key(name) {
            return Err(AsmError::UndefinedSymbol { line: *line, name: name.clone() });
        }
    }

    // overlap check
    let mut spans: Vec<(u32, u64)> = sections.iter().map(|s| (s.base, s.base as u64 + 4 * s.size as u64)).collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 as u64 > w[0].0 as u64 && (w[1].0 as u64) < w[0].1 || w[1].0 == w[0].0 && w[0].1 > w[0].0 as u64 {
            return Err(AsmError::Overlap { a: w[0].0, b: w[1].0 });
        }
    }
    for s in &sections {
        if s.base as u64 + 4 * s.size as u64 > 1u64 << 32 {
            return Err(AsmError::Range { line: s.line, msg: "section exceeds the address space".into() });
        }
    }

    // pass 2: encode
    let mut out = Vec::new();
    for s in sections {
        let mut words = Vec::with_capacity(s.size as usize);
        for item in s.items {
            match item {
                Item::Word { line, expr } => {
                    let ctx = Ctx { symbols: &symbols, line, lenient: false };
                    let v = ctx.eval(&expr)?;
                    if v < i32::MIN as i64 || v > u32::MAX as i64 {
                        return Err(ctx.range(format!(".word value {v} does not fit 32 bits")));
                    }
                    words.push(v as u32);
                }
                Item::Instr { line, addr, mnemonic, ops } => {
                    let ctx = Ctx { symbols: &symbols, line, lenient: false };
                    for instr in lower(&ctx, &mnemonic, &ops, addr)? {
                        let w = isa::encode(&instr).map_err(|e| ctx.range(e.to_string()))?;
                        words.push(w);
                    }
                }
            }
        }
        debug_assert_eq!(words.len() as u32, s.size);
        out.push(Section { base: s.base, words });
    }
    out.retain(|s| !s.words.is_empty());
    let entry = symbols.get("_start").copied().or_else(|| out.first().map(|s| s.base)).unwrap_or(CODE_BASE);
    Ok(ProgramImage { sections: out, entry, symbols })
}

fn arity(ctx: &Ctx, m: &str, ops: &[String], n: usize) -> Result<(), AsmError> {
    if ops.len() != n {
        return Err(ctx.syntax(format!("`{m}` takes {n} operand(s), got {}", ops.len())));
    }
    Ok(())
}

fn li_words(rd: u8, v: i64, force_pair: bool) -> Vec<Instruction> {
    let v = v as u32;
    if !force_pair && ((v as i32) >= -2048 && (v as i32) < 2048) {
        return vec![Instruction::OpImm { op: ImmOp::Addi, rd, rs1: 0, imm: v as i32 }];
    }
    let hi = v.wrapping_add(0x800) >> 12;
    let lo = ((v << 20) as i32) >> 20;
    vec![Instruction::Lui { rd, imm: hi & 0xFFFFF }, Instruction::OpImm { op: ImmOp::Addi, rd, rs1: rd, imm: lo }]
}

/// Translates one statement into instructions.
fn lower(ctx: &Ctx, m: &str, ops: &[String], pc: u32) -> Result<Vec<Instruction>, AsmError> {
    use Instruction as I;
    let one = |i: Instruction| Ok(vec![i]);

    if let Some(op) = RegOp::ALL.into_iter().find(|o| o.mnemonic() == m) {
        arity(ctx, m, ops, 3)?;
        return one(I::Op { op, rd: ctx.reg(&ops[0])?, rs1: ctx.reg(&ops[1])?, rs2: ctx.reg(&ops[2])? });
    }
    if let Some(op) = ImmOp::ALL.into_iter().find(|o| o.mnemonic() == m) {
        arity(ctx, m, ops, 3)?;
        let imm = if op.is_shift() {
            ctx.imm_in(&ops[2], 0, 31, "shift amount")?
        } else {
            ctx.imm_in(&ops[2], -2048, 2047, "immediate")?
        };
        return one(I::OpImm { op, rd: ctx.reg(&ops[0])?, rs1: ctx.reg(&ops[1])?, imm: imm as i32 });
    }
    if let Some(width) = LoadWidth::ALL.into_iter().find(|w| w.mnemonic() == m) {
        arity(ctx, m, ops, 2)?;
        let (offset, rs1, post) = ctx.mem(&ops[1])?;
        if post {
            return Err(ctx.syntax("post-increment needs p.lw"));
        }
        return one(I::Load { width, rd: ctx.reg(&ops[0])?, rs1, offset });
    }
    if let Some(width) = StoreWidth::ALL.into_iter().find(|w| w.mnemonic() == m) {
        arity(ctx, m, ops, 2)?;
        let (offset, rs1, post) = ctx.mem(&ops[1])?;
        if post {
            return Err(ctx.syntax("post-increment needs p.sw"));
        }
        return one(I::Store { width, rs1, rs2: ctx.reg(&ops[0])?, offset });
    }
    if let Some(cond) = BranchCond::ALL.into_iter().find(|c| c.mnemonic() == m) {
        arity(ctx, m, ops, 3)?;
        return one(I::Branch {
            cond,
            rs1: ctx.reg(&ops[0])?,
            rs2: ctx.reg(&ops[1])?,
            offset: ctx.target(&ops[2], pc, 13)?,
        });
    }
    if let Some(rest) = m.strip_prefix("pv.") {
        return lower_pv(ctx, m, rest, ops).map(|i| vec![i]);
    }
    if let Some(r) = m.strip_prefix("nn.lw.") {
        let dst = match r.as_bytes() {
            [b'w', d] if (b'0'..=b'3').contains(d) => NnReg::weight(d - b'0'),
            [b'a', d] if (b'0'..=b'1').contains(d) => NnReg::act(d - b'0'),
            _ => None,
        }
        .ok_or_else(|| AsmError::UnknownMnemonic { line: ctx.line, mnemonic: m.to_string() })?;
        arity(ctx, m, ops, 1)?;
        let (offset, rs1, post) = ctx.mem(&ops[0])?;
        if !post {
            return Err(ctx.syntax("nn.lw requires post-increment addressing `(rs1!)`"));
        }
        return one(I::NnLoad { dst, rs1, offset });
    }

    match m {
        "lui" | "auipc" => {
            arity(ctx, m, ops, 2)?;
            let rd = ctx.reg(&ops[0])?;
            let imm = ctx.imm_in(&ops[1], 0, 0xFFFFF, "20-bit immediate")? as u32;
            one(if m == "lui" { I::Lui { rd, imm } } else { I::Auipc { rd, imm } })
        }
        "jal" => {
            let (rd, t) = match ops.len() {
                1 => (1, &ops[0]),
                2 => (ctx.reg(&ops[0])?, &ops[1]),
                _ => return Err(ctx.syntax("jal takes [rd,] target")),
            };
            one(I::Jal { rd, offset: ctx.target(t, pc, 21)? })
        }
        "j" => {
            arity(ctx, m, ops, 1)?;
            one(I::Jal { rd: 0, offset: ctx.target(&ops[0], pc, 21)? })
        }
        "jalr" => {
            arity(ctx, m, ops, 2)?;
            let (offset, rs1, post) = ctx.mem(&ops[1])?;
            if post {
                return Err(ctx.syntax("jalr takes offset(rs1)"));
            }
            one(I::Jalr { rd: ctx.reg(&ops[0])?, rs1, offset })
        }
        "ret" => {
            arity(ctx, m, ops, 0)?;
            one(I::Jalr { rd: 0, rs1: 1, offset: 0 })
        }
        "beqz" | "bnez" => {
            arity(ctx, m, ops, 2)?;
            let cond = if m == "beqz" { BranchCond::Eq } else { BranchCond::Ne };
            one(I::Branch { cond, rs1: ctx.reg(&ops[0])?, rs2: 0, offset: ctx.target(&ops[1], pc, 13)? })
        }
        "nop" => {
            arity(ctx, m, ops, 0)?;
            one(I::OpImm { op: ImmOp::Addi, rd: 0, rs1: 0, imm: 0 })
        }
        "mv" => {
            arity(ctx, m, ops, 2)?;
            one(I::OpImm { op: ImmOp::Addi, rd: ctx.reg(&ops[0])?, rs1: ctx.reg(&ops[1])?, imm: 0 })
        }
        "li" => {
            arity(ctx, m, ops, 2)?;
            let rd = ctx.reg(&ops[0])?;
            let v = ctx.imm_in(&ops[1], i32::MIN as i64, u32::MAX as i64, "li value")?;
            let pair = parse_number(&ops[1]).is_none_or(|lit| !(-2048..2048).contains(&lit));
            Ok(li_words(rd, v, pair))
        }
        "la" => {
            arity(ctx, m, ops, 2)?;
            let rd = ctx.reg(&ops[0])?;
            let v = ctx.eval(&ops[1])?;
            Ok(li_words(rd, v, true))
        }
        "p.lw" | "p.sw" => {
            arity(ctx, m, ops, 2)?;
            let (offset, rs1, post) = ctx.mem(&ops[1])?;
            if !post {
                return Err(ctx.syntax(format!("{m} requires post-increment addressing `(rs1!)`")));
            }
            let r = ctx.reg(&ops[0])?;
            one(if m == "p.lw" { I::LoadPost { rd: r, rs1, offset } } else { I::StorePost { rs1, rs2: r, offset } })
        }
        "p.extract" | "p.extractu" | "p.insert" => {
            arity(ctx, m, ops, 4)?;
            let rd = ctx.reg(&ops[0])?;
            let rs1 = ctx.reg(&ops[1])?;
            let len = ctx.imm_in(&ops[2], 1, 32, "bit-field length")? as u8;
            let pos = ctx.imm_in(&ops[3], 0, 31, "bit-field position")? as u8;
            if len as u32 + pos as u32 > 32 {
                return Err(ctx.range("bit field exceeds 32 bits"));
            }
            one(match m {
                "p.insert" => I::Insert { rd, rs1, len, pos },
                _ => I::Extract { signed: m == "p.extract", rd, rs1, len, pos },
            })
        }
        "lp.starti" | "lp.endi" | "lp.count" | "lp.counti" | "lp.setup" | "lp.setupi" => {
            let want = if matches!(m, "lp.setup" | "lp.setupi") { 3 } else { 2 };
            arity(ctx, m, ops, want)?;
            let level = ctx.imm_in(&ops[0], 0, 1, "loop index")? as u8;
            let op = match m {
                "lp.starti" => LoopOp::Starti { offset: ctx.loop_target(&ops[1], pc, isa::LOOP_IMM_MAX)? },
                "lp.endi" => LoopOp::Endi { offset: ctx.loop_target(&ops[1], pc, isa::LOOP_IMM_MAX)? },
                "lp.count" => LoopOp::Count { rs1: ctx.reg(&ops[1])? },
                "lp.counti" => LoopOp::Counti { count: ctx.imm_in(&ops[1], 0, 4095, "loop count")? as u16 },
                "lp.setup" => LoopOp::Setup {
                    rs1: ctx.reg(&ops[1])?,
                    offset: ctx.loop_target(&ops[2], pc, isa::LOOP_IMM_MAX)?,
                },
                _ => LoopOp::Setupi {
                    count: ctx.imm_in(&ops[1], 0, 4095, "loop count")? as u16,
                    offset: ctx.loop_target(&ops[2], pc, isa::SETUPI_OFFSET_MAX)?,
                },
            };
            one(I::HwLoop { level, op })
        }
        "barrier" => {
            arity(ctx, m, ops, 0)?;
            one(I::Barrier)
        }
        "halt" | "ebreak" => {
            arity(ctx, m, ops, 0)?;
            one(I::Halt)
        }
        _ => Err(AsmError::UnknownMnemonic { line: ctx.line, mnemonic: m.to_string() }),
    }
}

fn dot_kind(name: &str) -> Option<(Signedness, bool)> {
    let (acc, sign) = match name.strip_prefix("sdot") {
        Some(s) => (true, s),
        None => (false, name.strip_prefix("dot")?),
    };
    Some((Signedness::from_suffix(sign)?, acc))
}

fn lower_pv(ctx: &Ctx, m: &str, rest: &str, ops: &[String]) -> Result<Instruction, AsmError> {
    let unknown = || AsmError::UnknownMnemonic { line: ctx.line, mnemonic: m.to_string() };
    let parts: Vec<&str> = rest.split('.').collect();

    // pv.cu<sdot><sign>.<fmt>.<i>
    if let Some(cu) = parts[0].strip_prefix("cu") {
        let [_, fmt, idx] = parts.as_slice() else { return Err(unknown()) };
        let (sign, acc) = dot_kind(cu).ok_or_else(unknown)?;
        let fmt = SimdFormat::from_suffix(fmt).ok_or_else(unknown)?;
        let nn = match *idx {
            "0" => 0,
            "1" => 1,
            "2" => 2,
            "3" => 3,
            _ => return Err(unknown()),
        };
        if !acc {
            return Err(unknown());
        }
        arity(ctx, m, ops, 3)?;
        return Ok(Instruction::ComputeUpdate {
            fmt,
            sign,
            nn,
            rd: ctx.reg(&ops[0])?,
            rs1: ctx.reg(&ops[1])?,
            rs2: ctx.reg(&ops[2])?,
        });
    }

    // pv.nnsdot<sign>.<fmt>
    if let Some(nn) = parts[0].strip_prefix("nn") {
        let [_, fmt] = parts.as_slice() else { return Err(unknown()) };
        let (sign, acc) = dot_kind(nn).ok_or_else(unknown)?;
        let fmt = SimdFormat::from_suffix(fmt).ok_or_else(unknown)?;
        if !acc {
            return Err(unknown());
        }
        if ops.len() < 3 {
            return Err(ctx.syntax("nn_sdotp takes rd, rs1, imm5 or rd, rs1, aK, wJ[, upd=a|w]"));
        }
        let rd = ctx.reg(&ops[0])?;
        let rs1 = ctx.reg(&ops[1])?;
        let imm = if ops.len() == 3 && !ops[2].starts_with('a') {
            let bits = ctx.imm_in(&ops[2], 0, 31, "nn_sdotp immediate")? as u8;
            NnImm::new(bits).ok_or_else(|| ctx.range("nn_sdotp update bits are mutually exclusive"))?
        } else {
            parse_nn_alias(ctx, &ops[2..])?
        };
        return Ok(Instruction::NnSdotp { fmt, sign, rd, rs1, imm });
    }

    let (name, scalar, fmt) = match parts.as_slice() {
        [name, "sc", fmt] => (*name, true, *fmt),
        [name, fmt] => (*name, false, *fmt),
        _ => return Err(unknown()),
    };
    let fmt = SimdFormat::from_suffix(fmt).ok_or_else(unknown)?;
    if let Some((sign, accumulate)) = dot_kind(name) {
        arity(ctx, m, ops, 3)?;
        return Ok(Instruction::Dot {
            fmt,
            sign,
            accumulate,
            scalar,
            rd: ctx.reg(&ops[0])?,
            rs1: ctx.reg(&ops[1])?,
            rs2: ctx.reg(&ops[2])?,
        });
    }
    let op = VecOp::ALL.into_iter().find(|o| o.name() == name).ok_or_else(unknown)?;
    if !matches!(fmt, SimdFormat::N | SimdFormat::C) {
        return Err(unknown());
    }
    if op == VecOp::Abs {
        if scalar {
            return Err(unknown());
        }
        arity(ctx, m, ops, 2)?;
        return Ok(Instruction::VecAlu { op, fmt, scalar, rd: ctx.reg(&ops[0])?, rs1: ctx.reg(&ops[1])?, rs2: 0 });
    }
    arity(ctx, m, ops, 3)?;
    Ok(Instruction::VecAlu { op, fmt, scalar, rd: ctx.reg(&ops[0])?, rs1: ctx.reg(&ops[1])?, rs2: ctx.reg(&ops[2])? })
}

fn parse_nn_alias(ctx: &Ctx, ops: &[String]) -> Result<NnImm, AsmError> {
    let bad = || ctx.syntax("expected `aK, wJ[, upd=a|w]`");
    let act = match ops.first().map(String::as_str) {
        Some("a0") => 0,
        Some("a1") => 1,
        _ => return Err(bad()),
    };
    let weight = match ops.get(1).map(String::as_str) {
        Some("w0") => 0,
        Some("w1") => 1,
        Some("w2") => 2,
        Some("w3") => 3,
        _ => return Err(bad()),
    };
    let update = match ops.get(2).map(|s| s.replace(' ', "")) {
        None => None,
        Some(s) if s == "upd=a" => Some(NnUpdate::Act),
        Some(s) if s == "upd=w" => Some(NnUpdate::Weight),
        Some(_) => return Err(bad()),
    };
    if ops.len() > 3 {
        return Err(bad());
    }
    NnImm::from_parts(act, weight, update).ok_or_else(bad)
}

// ---------------------------------------------------------------------------
// disassembler

fn x(r: u8) -> String {
    format!("x{r}")
}

/// Canonical text of one instruction located at `pc`. Control-flow targets
/// are rendered as absolute addresses.
pub fn format_instruction(instr: &Instruction, pc: u32) -> String {
    use Instruction as I;
    let abs = |off: i32| format!("{:#010x}", pc.wrapping_add(off as u32));
    let lp = |off: u16| format!("{:#010x}", pc.wrapping_add(4 * off as u32));
    match *instr {
        I::Lui { rd, imm } => format!("lui {}, {imm:#x}", x(rd)),
        I::Auipc { rd, imm } => format!("auipc {}, {imm:#x}", x(rd)),
        I::Jal { rd, offset } => format!("jal {}, {}", x(rd), abs(offset)),
        I::Jalr { rd, rs1, offset } => format!("jalr {}, {offset}({})", x(rd), x(rs1)),
        I::Branch { cond, rs1, rs2, offset } => format!("{} {}, {}, {}", cond.mnemonic(), x(rs1), x(rs2), abs(offset)),
        I::Load { width, rd, rs1, offset } => format!("{} {}, {offset}({})", width.mnemonic(), x(rd), x(rs1)),
        I::Store { width, rs1, rs2, offset } => format!("{} {}, {offset}({})", width.mnemonic(), x(rs2), x(rs1)),
        I::OpImm { op, rd, rs1, imm } => format!("{} {}, {}, {imm}", op.mnemonic(), x(rd), x(rs1)),
        I::Op { op, rd, rs1, rs2 } => format!("{} {}, {}, {}", op.mnemonic(), x(rd), x(rs1), x(rs2)),
        I::LoadPost { rd, rs1, offset } => format!("p.lw {}, {offset}({}!)", x(rd), x(rs1)),
        I::StorePost { rs1, rs2, offset } => format!("p.sw {}, {offset}({}!)", x(rs2), x(rs1)),
        I::Extract { signed, rd, rs1, len, pos } => {
            format!("{} {}, {}, {len}, {pos}", if signed { "p.extract" } else { "p.extractu" }, x(rd), x(rs1))
        }
        I::Insert { rd, rs1, len, pos } => format!("p.insert {}, {}, {len}, {pos}", x(rd), x(rs1)),
        I::HwLoop { level, op } => match op {
            LoopOp::Starti { offset } => format!("lp.starti {level}, {}", lp(offset)),
            LoopOp::Endi { offset } => format!("lp.endi {level}, {}", lp(offset)),
            LoopOp::Count { rs1 } => format!("lp.count {level}, {}", x(rs1)),
            LoopOp::Counti { count } => format!("lp.counti {level}, {count}"),
            LoopOp::Setup { rs1, offset } => format!("lp.setup {level}, {}, {}", x(rs1), lp(offset)),
            LoopOp::Setupi { count, offset } => format!("lp.setupi {level}, {count}, {}", lp(offset)),
        },
        I::Dot { fmt, sign, accumulate, scalar, rd, rs1, rs2 } => format!(
            "pv.{}dot{}{}.{} {}, {}, {}",
            if accumulate { "s" } else { "" },
            sign.suffix(),
            if scalar { ".sc" } else { "" },
            fmt.suffix(),
            x(rd),
            x(rs1),
            x(rs2)
        ),
        I::VecAlu { op: VecOp::Abs, fmt, rd, rs1, .. } => format!("pv.abs.{} {}, {}", fmt.suffix(), x(rd), x(rs1)),
        I::VecAlu { op, fmt, scalar, rd, rs1, rs2 } => format!(
            "pv.{}{}.{} {}, {}, {}",
            op.name(),
            if scalar { ".sc" } else { "" },
            fmt.suffix(),
            x(rd),
            x(rs1),
            x(rs2)
        ),
        I::ComputeUpdate { fmt, sign, nn, rd, rs1, rs2 } => {
            format!("pv.cusdot{}.{}.{nn} {}, {}, {}", sign.suffix(), fmt.suffix(), x(rd), x(rs1), x(rs2))
        }
        I::NnSdotp { fmt, sign, rd, rs1, imm } => {
            let upd = match imm.update() {
                None => String::new(),
                Some(NnUpdate::Act) => ", upd=a".into(),
                Some(NnUpdate::Weight) => ", upd=w".into(),
            };
            format!(
                "pv.nnsdot{}.{} {}, {}, a{}, w{}{upd}",
                sign.suffix(),
                fmt.suffix(),
                x(rd),
                x(rs1),
                imm.act(),
                imm.weight()
            )
        }
        I::NnLoad { dst, rs1, offset } => format!("nn.lw.{} {offset}({}!)", dst.name(), x(rs1)),
        I::Barrier => "barrier".into(),
        I::Halt => "halt".into(),
    }
}

impl std::fmt::Display for Instruction {
    /// Renders with PC-relative targets resolved against address 0.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&format_instruction(self, 0))
    }
}

/// Canonical source for an image. Sections below [`CODE_BASE`] are emitted
/// as `.word` data; code sections must decode.
pub fn disassemble(img: &ProgramImage) -> Result<String, AsmError> {
    let mut out = String::new();
    let has_entry = img.sections.iter().any(|s| img.entry >= s.base && img.entry < s.end());
    if has_entry {
        out.push_str(".global _start\n");
    }
    for s in &img.sections {
        let _ = writeln!(out, ".org {:#010x}", s.base);
        for (i, &w) in s.words.iter().enumerate() {
            let addr = s.base + 4 * i as u32;
            if has_entry && addr == img.entry {
                out.push_str("_start:\n");
            }
            if s.base < CODE_BASE {
                let _ = writeln!(out, "    .word {w:#010x}");
                continue;
            }
            let instr = isa::decode(w).map_err(|source| AsmError::IllegalInstruction { address: addr, source })?;
            let _ = writeln!(out, "    {}", format_instruction(&instr, addr));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_word(src: &str) -> u32 {
        let img = assemble(src).unwrap();
        assert_eq!(img.sections.len(), 1);
        img.sections[0].words[0]
    }

    #[test]
    fn single_instruction_passthrough() {
        let want = isa::encode(&Instruction::Dot {
            fmt: SimdFormat::N,
            sign: Signedness::Sp,
            accumulate: true,
            scalar: false,
            rd: 5,
            rs1: 6,
            rs2: 7,
        })
        .unwrap();
        assert_eq!(one_word("pv.sdotsp.n x5, x6, x7"), want);
    }

    #[test]
    fn post_increment_load() {
        let w = one_word("p.lw x8, 4(x9!)");
        assert_eq!(isa::decode(w).unwrap(), Instruction::LoadPost { rd: 8, rs1: 9, offset: 4 });
        assert!(matches!(assemble("p.lw x8, 4(x9)"), Err(AsmError::Syntax { line: 1, .. })));
    }

    #[test]
    fn setupi_canonical_text() {
        let img = assemble("lp.setupi 0, 72, end\nnop\nend: halt").unwrap();
        let text = disassemble(&img).unwrap();
        assert!(text.contains("lp.setupi 0, 72, 0x1c000008"), "{text}");
    }

    #[test]
    fn nn_sdotp_alias_rendering() {
        // bit 0 = 0 (a0), bits 2:1 = 01 (w1), bit 3 set: update the activation
        let w = one_word("pv.nnsdotsp.b x1, x2, 0b01010");
        let text = format_instruction(&isa::decode(w).unwrap(), 0);
        assert_eq!(text, "pv.nnsdotsp.b x1, x2, a0, w1, upd=a");
        assert_eq!(one_word(&text), w);
        let w3 = one_word("pv.nnsdotusp.n x1, x2, a0, w3, upd=w");
        assert_eq!(isa::decode(w3).unwrap(), isa::decode(one_word("pv.nnsdotusp.n x1, x2, 0b10110")).unwrap());
    }

    #[test]
    fn labels_literals_and_pseudos() {
        let src = "
            .global _start
            _start:
                li a0, 0x12345678   # two words
                li a1, -5
                la t0, data
            loop: addi a1, a1, 1
                bnez a1, loop
                j done
            done: halt
            .org 0x10000000
            data: .word 1, 0b101, -1
        ";
        let img = assemble(src).unwrap();
        assert_eq!(img.entry, CODE_BASE);
        assert_eq!(img.symbol("loop"), Some(CODE_BASE + 20));
        assert_eq!(img.sections[1].words, vec![1, 5, 0xFFFF_FFFF]);
        let text = disassemble(&img).unwrap();
        let again = assemble(&text).unwrap();
        assert!(again.same_contents(&img));
    }

    #[test]
    fn error_kinds() {
        assert!(matches!(assemble("foo x1"), Err(AsmError::UnknownMnemonic { line: 1, .. })));
        assert!(matches!(assemble("a:\na:"), Err(AsmError::DuplicateLabel { line: 2, .. })));
        assert!(matches!(assemble("addi x1, x1, 5000"), Err(AsmError::Range { .. })));
        assert!(matches!(assemble("beq x1, x2, nowhere"), Err(AsmError::UndefinedSymbol { .. })));
        assert!(matches!(assemble("add x1, x2"), Err(AsmError::Syntax { .. })));
        assert!(matches!(assemble(".org 0x1c000000\nnop\n.org 0x1c000000\nnop"), Err(AsmError::Overlap { .. })));
        let img = ProgramImage { sections: vec![Section { base: CODE_BASE, words: vec![0] }], ..Default::default() };
        assert!(matches!(disassemble(&img), Err(AsmError::IllegalInstruction { address: CODE_BASE, .. })));
    }

    #[test]
    fn hex_image_roundtrip() {
        let img = assemble("_start: nop\nhalt\n.org 0x10000000\n.word 7").unwrap();
        let text = img.to_hex();
        assert!(text.contains("@1c000000\n00000013\n00100073"));
        let back = ProgramImage::from_hex(&text).unwrap();
        assert!(back.same_contents(&img));
        assert!(ProgramImage::from_hex("00000013").is_err());
    }
}
