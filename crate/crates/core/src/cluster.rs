//! Lockstep multi-core cluster sharing a word-interleaved, multi-banked
//! TCDM through a single-cycle interconnect with per-bank round-robin
//! arbitration, plus a cluster barrier.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::Section;
use crate::core_sim::{Access, Core, CycleReport, DataMemory, Event, Idle, MemFault, Program, SimError, TCDM_BASE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid cluster configuration: {0}")]
    Invalid(String),
    #[error("cannot parse cluster configuration: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_cores: usize,
    pub n_banks: usize,
    pub tcdm_bytes: usize,
    pub base: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { n_cores: 8, n_banks: 16, tcdm_bytes: 128 * 1024, base: TCDM_BASE }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    cores: Option<usize>,
    banks: Option<usize>,
    tcdm_bytes: Option<usize>,
    base_address: Option<u32>,
}

impl ClusterConfig {
    pub fn with_cores(n_cores: usize, n_banks: usize) -> Self {
        ClusterConfig { n_cores, n_banks, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.n_cores == 0 {
            return err("at least one core is required".into());
        }
        if !self.n_banks.is_power_of_two() {
            return err(format!("bank count {} is not a power of two", self.n_banks));
        }
        if self.n_banks < self.n_cores {
            return err(format!("{} banks cannot serve {} cores", self.n_banks, self.n_cores));
        }
        if self.tcdm_bytes == 0 || !self.tcdm_bytes.is_multiple_of(4 * self.n_banks) {
            return err(format!("TCDM size {} is not a whole number of words per bank", self.tcdm_bytes));
        }
        if !self.base.is_multiple_of(4) || self.base as u64 + self.tcdm_bytes as u64 > 1 << 32 {
            return err(format!("TCDM base {:#x} invalid", self.base));
        }
        Ok(())
    }

    /// Parses the TOML key-value form: `cores`, `banks`, `tcdm_bytes`,
    /// `base_address`. Missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let f: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let d = ClusterConfig::default();
        let cfg = ClusterConfig {
            n_cores: f.cores.unwrap_or(d.n_cores),
            n_banks: f.banks.unwrap_or(d.n_banks),
            tcdm_bytes: f.tcdm_bytes.unwrap_or(d.tcdm_bytes),
            base: f.base_address.unwrap_or(d.base),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbiterStats {
    /// Distinct requests presented (a stalled request counts once).
    pub requests: u64,
    pub grants: u64,
    /// Cycles a bank had more than one requester.
    pub conflict_cycles: u64,
    /// Longest wait, in cycles, between first presentation and grant.
    pub max_wait: u64,
}

/// The banked scratchpad. Word `w` (counted from `base`) lives in bank
/// `w mod n_banks` at row `w / n_banks`.
#[derive(Debug, Clone)]
pub struct Tcdm {
    base: u32,
    n_banks: usize,
    rows: usize,
    banks: Vec<Vec<u32>>,
    rr: Vec<usize>,
}

impl Tcdm {
    pub fn new(cfg: &ClusterConfig) -> Self {
        let rows = cfg.tcdm_bytes / 4 / cfg.n_banks;
        Tcdm { base: cfg.base, n_banks: cfg.n_banks, rows, banks: vec![vec![0; rows]; cfg.n_banks], rr: vec![0; cfg.n_banks] }
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn size_bytes(&self) -> usize {
        self.rows * self.n_banks * 4
    }

    pub fn n_banks(&self) -> usize {
        self.n_banks
    }

    #[inline]
    pub fn bank_of(&self, addr: u32) -> usize {
        ((addr.wrapping_sub(self.base) / 4) as usize) & (self.n_banks - 1)
    }

    #[inline]
    fn locate(&self, addr: u32, size: u32) -> Result<(usize, usize, u32), MemFault> {
        if !addr.is_multiple_of(size) {
            return Err(MemFault::Misaligned(addr));
        }
        let off = addr.wrapping_sub(self.base) as usize;
        if addr < self.base || off + size as usize > self.size_bytes() {
            return Err(MemFault::OutOfRange(addr));
        }
        let w = off / 4;
        Ok((w & (self.n_banks - 1), w / self.n_banks, (off % 4) as u32 * 8))
    }

    pub fn read_word(&self, addr: u32) -> Result<u32, MemFault> {
        let (b, r, _) = self.locate(addr, 4)?;
        Ok(self.banks[b][r])
    }

    pub fn write_word(&mut self, addr: u32, v: u32) -> Result<(), MemFault> {
        let (b, r, _) = self.locate(addr, 4)?;
        self.banks[b][r] = v;
        Ok(())
    }

    pub fn write_words(&mut self, addr: u32, words: &[u32]) -> Result<(), MemFault> {
        for (i, &w) in words.iter().enumerate() {
            self.write_word(addr + 4 * i as u32, w)?;
        }
        Ok(())
    }

    pub fn read_words(&self, addr: u32, n: usize) -> Result<Vec<u32>, MemFault> {
        (0..n).map(|i| self.read_word(addr + 4 * i as u32)).collect()
    }

    pub fn write_bytes(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MemFault> {
        for (i, &b) in bytes.iter().enumerate() {
            self.store(addr + i as u32, 1, b as u32)?;
        }
        Ok(())
    }

    pub fn read_bytes(&mut self, addr: u32, n: usize) -> Result<Vec<u8>, MemFault> {
        (0..n).map(|i| self.load(addr + i as u32, 1).map(|v| v as u8)).collect()
    }

    /// Loads image sections that fall inside the TCDM.
    pub fn load_sections(&mut self, sections: &[Section]) -> Result<(), MemFault> {
        for s in sections {
            self.write_words(s.base, &s.words)?;
        }
        Ok(())
    }

    /// Whole memory as one section, trimmed to the last non-zero word.
    pub fn dump(&self) -> Section {
        let n = self.size_bytes() / 4;
        let words: Vec<u32> = (0..n).map(|w| self.banks[w % self.n_banks][w / self.n_banks]).collect();
        let keep = words.iter().rposition(|&w| w != 0).map_or(0, |p| p + 1);
        Section { base: self.base, words: words[..keep].to_vec() }
    }

    /// Grants at most one request per bank; `granted[k]` answers
    /// `requests[k]`. Among contenders the first core at or after the
    /// bank's round-robin pointer wins and the pointer moves past it.
    pub fn arbitrate(&mut self, requests: &[(usize, Access)], n_cores: usize, granted: &mut Vec<bool>) -> u64 {
        granted.clear();
        granted.resize(requests.len(), false);
        let mut conflicts = 0;
        for k in 0..requests.len() {
            let bank = self.bank_of(requests[k].1.addr);
            // handle each bank once, at its first requester
            if requests[..k].iter().any(|(_, a)| self.bank_of(a.addr) == bank) {
                continue;
            }
            let ptr = self.rr[bank];
            let mut best: Option<(usize, usize)> = None;
            let mut contenders = 0;
            for (j, (core, a)) in requests.iter().enumerate().skip(k) {
                if self.bank_of(a.addr) != bank {
                    continue;
                }
                contenders += 1;
                let dist = (core + n_cores - ptr) % n_cores;
                if best.is_none_or(|(d, _)| dist < d) {
                    best = Some((dist, j));
                }
            }
            if contenders > 1 {
                conflicts += 1;
            }
            let (_, j) = best.expect("bank has a requester");
            granted[j] = true;
            self.rr[bank] = (requests[j].0 + 1) % n_cores;
        }
        conflicts
    }
}

impl DataMemory for Tcdm {
    #[inline]
    fn load(&mut self, addr: u32, size: u32) -> Result<u32, MemFault> {
        let (b, r, shift) = self.locate(addr, size)?;
        let w = self.banks[b][r];
        Ok(if size == 4 { w } else { (w >> shift) & ((1 << (8 * size)) - 1) })
    }

    #[inline]
    fn store(&mut self, addr: u32, size: u32, value: u32) -> Result<(), MemFault> {
        let (b, r, shift) = self.locate(addr, size)?;
        let slot = &mut self.banks[b][r];
        if size == 4 {
            *slot = value;
        } else {
            let m = ((1u32 << (8 * size)) - 1) << shift;
            *slot = (*slot & !m) | ((value << shift) & m);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub per_core: Vec<CycleReport>,
    pub aggregate: CycleReport,
    pub arbiter: ArbiterStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plan {
    Skip,
    Idle(Idle),
    Exec,
    Request(usize),
}

pub struct Cluster {
    config: ClusterConfig,
    tcdm: Tcdm,
    cores: Vec<Core>,
    arrived: Vec<bool>,
    generation: u64,
    cycle: u64,
    wait_since: Vec<Option<u64>>,
    stats: ArbiterStats,
    plan: Vec<Plan>,
    requests: Vec<(usize, Access)>,
    granted: Vec<bool>,
}

impl Cluster {
    /// Creates the cluster with every core at the program entry, `a0` set to
    /// its core id and `a1` to the core count.
    pub fn new(config: ClusterConfig, program: Arc<Program>) -> Result<Self, ConfigError> {
        config.validate()?;
        let cores = (0..config.n_cores)
            .map(|i| {
                let mut c = Core::new(i, program.clone());
                c.set_reg(10, i as u32);
                c.set_reg(11, config.n_cores as u32);
                c
            })
            .collect();
        Ok(Cluster {
            tcdm: Tcdm::new(&config),
            cores,
            arrived: vec![false; config.n_cores],
            generation: 0,
            cycle: 0,
            wait_since: vec![None; config.n_cores],
            stats: ArbiterStats::default(),
            plan: Vec::with_capacity(config.n_cores),
            requests: Vec::with_capacity(config.n_cores),
            granted: Vec::with_capacity(config.n_cores),
            config,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn tcdm(&self) -> &Tcdm {
        &self.tcdm
    }

    pub fn tcdm_mut(&mut self) -> &mut Tcdm {
        &mut self.tcdm
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn core_mut(&mut self, i: usize) -> &mut Core {
        &mut self.cores[i]
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn arbiter_stats(&self) -> ArbiterStats {
        self.stats
    }

    /// Writes `args` into `a0..` of one core.
    pub fn set_args(&mut self, core: usize, args: &[u32]) {
        for (i, &v) in args.iter().take(8).enumerate() {
            self.cores[core].set_reg(10 + i as u8, v);
        }
    }

    pub fn all_halted(&self) -> bool {
        self.cores.iter().all(|c| c.halted())
    }

    /// Marks a core as waiting at the barrier.
    pub fn barrier_arrive(&mut self, core: usize) -> Result<(), SimError> {
        if self.arrived[core] {
            return Err(SimError::Protocol(format!(
                "core {core} arrived twice at barrier generation {}",
                self.generation
            )));
        }
        self.arrived[core] = true;
        Ok(())
    }

    fn try_release(&mut self) {
        if !self.arrived.iter().any(|&a| a) {
            return;
        }
        let all = self.cores.iter().zip(&self.arrived).all(|(c, &a)| a || c.halted());
        if all {
            self.arrived.iter_mut().for_each(|a| *a = false);
            self.generation += 1;
        }
    }

    /// Advances the whole cluster by one cycle.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.plan.clear();
        self.requests.clear();
        for (i, c) in self.cores.iter().enumerate() {
            let p = if c.halted() {
                Plan::Skip
            } else if self.arrived[i] {
                Plan::Idle(Idle::Barrier)
            } else if c.in_penalty() {
                Plan::Idle(Idle::BranchPenalty)
            } else {
                match c.next_access()? {
                    Some(a) => {
                        self.requests.push((i, a));
                        Plan::Request(self.requests.len() - 1)
                    }
                    None => Plan::Exec,
                }
            };
            self.plan.push(p);
        }

        if !self.requests.is_empty() {
            let n = self.config.n_cores;
            self.stats.conflict_cycles += self.tcdm.arbitrate(&self.requests, n, &mut self.granted);
            for (k, &(core, _)) in self.requests.iter().enumerate() {
                let since = *self.wait_since[core].get_or_insert_with(|| {
                    self.stats.requests += 1;
                    self.cycle
                });
                if self.granted[k] {
                    self.stats.grants += 1;
                    self.stats.max_wait = self.stats.max_wait.max(self.cycle - since);
                    self.wait_since[core] = None;
                }
            }
        }

        for i in 0..self.cores.len() {
            match self.plan[i] {
                Plan::Skip => {}
                Plan::Idle(why) => self.cores[i].idle(why),
                Plan::Request(k) if !self.granted[k] => self.cores[i].idle(Idle::Contention),
                Plan::Exec | Plan::Request(_) => {
                    if self.cores[i].execute(&mut self.tcdm)? == Event::Barrier {
                        self.barrier_arrive(i)?;
                    }
                }
            }
        }
        self.try_release();
        self.cycle += 1;
        Ok(())
    }

    /// Runs until every core halts.
    pub fn run(&mut self, max_cycles: u64) -> Result<ClusterReport, SimError> {
        while !self.all_halted() {
            if self.cycle >= max_cycles {
                return Err(SimError::MaxCyclesExceeded(max_cycles));
            }
            self.step()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> ClusterReport {
        let per_core: Vec<CycleReport> = self.cores.iter().map(|c| *c.report()).collect();
        let aggregate = CycleReport::aggregate(&per_core);
        ClusterReport { per_core, aggregate, arbiter: self.stats }
    }
}

/// Runs `program` on a fresh cluster whose TCDM is prepared by `init`.
/// Core `i` receives `args[i]` in `a0..` when given, else its id and the
/// core count.
pub fn run_parallel(
    config: ClusterConfig,
    program: Arc<Program>,
    init: impl FnOnce(&mut Tcdm) -> Result<(), MemFault>,
    args: Option<&[Vec<u32>]>,
    max_cycles: u64,
) -> Result<(Cluster, ClusterReport), SimError> {
    let mut cl = Cluster::new(config, program).map_err(|e| SimError::Protocol(e.to_string()))?;
    init(&mut cl.tcdm).map_err(|f| SimError::Trap {
        core: 0,
        pc: 0,
        cycle: 0,
        cause: f.into(),
    })?;
    if let Some(args) = args {
        for (i, a) in args.iter().enumerate().take(config.n_cores) {
            cl.set_args(i, a);
        }
    }
    let report = cl.run(max_cycles)?;
    Ok((cl, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    fn program(src: &str) -> Arc<Program> {
        Arc::new(Program::from_image(&assemble(src).unwrap()))
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::default().validate().is_ok());
        assert!(ClusterConfig::with_cores(8, 12).validate().is_err());
        assert!(ClusterConfig::with_cores(8, 4).validate().is_err());
        let c = ClusterConfig::from_toml("cores = 4\nbanks = 8\n").unwrap();
        assert_eq!((c.n_cores, c.n_banks, c.tcdm_bytes), (4, 8, 128 * 1024));
        assert!(matches!(ClusterConfig::from_toml("cores = 4\nbogus = 1"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn bank_mapping() {
        let t = Tcdm::new(&ClusterConfig::default());
        assert_eq!(t.bank_of(TCDM_BASE), 0);
        assert_eq!(t.bank_of(TCDM_BASE + 4), 1);
        assert_eq!(t.bank_of(TCDM_BASE + 64), 0);
    }

    #[test]
    fn two_cores_same_bank() {
        // both cores load the same word once
        let p = program("lui x5, 0x10000\nlw x6, 0(x5)\nhalt");
        let mut cl = Cluster::new(ClusterConfig::with_cores(2, 16), p).unwrap();
        let r = cl.run(100).unwrap();
        assert_eq!(r.per_core[0].contention_stalls, 0);
        assert_eq!(r.per_core[1].contention_stalls, 1);
        assert_eq!(r.per_core[1].cycles, r.per_core[0].cycles + 1);
        assert_eq!(r.arbiter.requests, r.arbiter.grants);
    }

    #[test]
    fn distinct_banks_do_not_conflict() {
        // core i loads word i
        let p = program("lui x5, 0x10000\nslli x6, a0, 2\nadd x5, x5, x6\nlw x7, 0(x5)\nhalt");
        let mut cl = Cluster::new(ClusterConfig::default(), p).unwrap();
        let r = cl.run(100).unwrap();
        assert!(r.per_core.iter().all(|c| c.contention_stalls == 0));
    }

    #[test]
    fn barrier_straggler() {
        // core 1 spins k extra iterations before the barrier
        let src = "
            li t0, 0
            beqz a0, arrive
            li t0, 5
        spin: addi t0, t0, -1
            bnez t0, spin
        arrive: barrier
            halt
        ";
        let mut cl = Cluster::new(ClusterConfig::with_cores(2, 16), program(src)).unwrap();
        let r = cl.run(1000).unwrap();
        let (c0, c1) = (&r.per_core[0], &r.per_core[1]);
        assert_eq!(c1.barrier_cycles, 0);
        // both leave the barrier on the same cycle, so they finish together
        assert_eq!(c0.cycles, c1.cycles);
        assert_eq!(c0.barrier_cycles, c1.cycles - (c0.cycles - c0.barrier_cycles));
        assert_eq!(cl.generation(), 1);
    }

    #[test]
    fn single_core_barrier_releases_next_cycle() {
        let mut cl = Cluster::new(ClusterConfig::with_cores(1, 16), program("barrier\nhalt")).unwrap();
        let r = cl.run(10).unwrap();
        assert_eq!(r.aggregate.cycles, 2);
        assert_eq!(r.aggregate.barrier_cycles, 0);
    }

    #[test]
    fn double_arrive_is_protocol_error() {
        let mut cl = Cluster::new(ClusterConfig::with_cores(2, 16), program("halt")).unwrap();
        cl.barrier_arrive(0).unwrap();
        assert!(matches!(cl.barrier_arrive(0), Err(SimError::Protocol(_))));
    }
}
