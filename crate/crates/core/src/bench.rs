//! Benchmark matrix: every (layer, precision, variant) cell is generated,
//! run on one core and on the configured cluster, verified against the
//! golden convolution, and reduced to cycle metrics.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::ClusterConfig;
use crate::kernels::{load_load_mac_opef, KernelError, KernelPlan, LayerData, LayerRun, Variant};
use crate::quant::{ConvGeometry, QuantTensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("{cell}: output element {index} is {got}, golden is {want}")]
    Verification { cell: String, index: usize, got: i32, want: i32 },
    #[error("{cell}: {source}")]
    Kernel {
        cell: String,
        #[source]
        source: KernelError,
    },
}

/// Parses `HxWxC,KxFxFxC` into a stride-1, same-padded geometry.
pub fn parse_layer(s: &str) -> Result<ConvGeometry, String> {
    let bad = || format!("layer `{s}` is not of the form HxWxC,KxFxFxC");
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let dims = |t: &str| -> Result<Vec<usize>, String> { t.trim().split('x').map(|d| d.parse().map_err(|_| bad())).collect() };
    let (i, w) = (dims(a)?, dims(b)?);
    if i.len() != 3 || w.len() != 4 {
        return Err(bad());
    }
    if w[1] != w[2] || w[3] != i[2] {
        return Err(format!("layer `{s}`: filter must be square with {} input channels", i[2]));
    }
    let g = ConvGeometry::same(i[0], i[1], i[2], w[0], w[1]);
    g.validate().map_err(|e| e.to_string())?;
    Ok(g)
}

pub fn layer_name(g: &ConvGeometry) -> String {
    format!("{}x{}x{},{}x{}x{}x{}", g.h_in, g.w_in, g.c_in, g.c_out, g.f, g.f, g.c_in)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub precisions: Vec<u32>,
    /// Layers as `HxWxC,KxFxFxC`.
    pub layers: Vec<String>,
    pub cores: usize,
    pub banks: usize,
    pub seed: u64,
    /// Requantization shift shared by all channels.
    pub shift: u32,
    pub max_cycles: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::ALL.to_vec(),
            precisions: vec![8, 4, 2],
            layers: vec!["16x16x32,64x3x3x32".into()],
            cores: 8,
            banks: 16,
            seed: 1,
            shift: 16,
            max_cycles: 1 << 32,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn geometries(&self) -> Result<Vec<ConvGeometry>, BenchError> {
        self.layers.iter().map(|l| parse_layer(l).map_err(BenchError::Config)).collect()
    }

    /// The (layer, bits, variant) cells, skipping variants that do not
    /// exist at a precision.
    pub fn cells(&self) -> Result<Vec<(ConvGeometry, u32, Variant)>, BenchError> {
        let mut out = Vec::new();
        for g in self.geometries()? {
            for &b in &self.precisions {
                for &v in &self.variants {
                    if v.supports(b) {
                        out.push((g, b, v));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Checks the cluster and that every cell can be generated.
    pub fn validate(&self) -> Result<(), BenchError> {
        ClusterConfig::with_cores(self.cores, self.banks).validate().map_err(|e| BenchError::Config(e.to_string()))?;
        if self.precisions.iter().any(|b| !matches!(b, 2 | 4 | 8)) {
            return Err(BenchError::Config(format!("precisions must be 8, 4 or 2, got {:?}", self.precisions)));
        }
        for (g, b, v) in self.cells()? {
            for n in [1, self.cores] {
                KernelPlan::new(v, b, g, n, self.shift).map_err(|e| {
                    BenchError::Config(format!("{} {b}-bit {v} on {n} cores: {e}", layer_name(&g)))
                })?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&serde_json::to_value(self).expect("config serializes")).expect("value serializes");
        Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Metrics of one kernel run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub cores: usize,
    pub cycles: u64,
    /// Phase cycles summed over cores.
    pub im2col_cycles: u64,
    pub matmul_cycles: u64,
    pub requant_cycles: u64,
    pub simd_macs: u64,
    pub lane_macs: u64,
    pub retired: u64,
    pub contention_stalls: u64,
    pub branch_penalty_cycles: u64,
    /// MatMul-phase cycles per SIMD MAC, per core.
    pub matmul_cycles_per_mac: f64,
    pub inner_opef: f64,
    /// Largest relative deviation of a core's cycle count from the mean.
    pub core_imbalance: f64,
}

impl RunMetrics {
    pub fn from_run(run: &LayerRun) -> Self {
        let p = run.phase_sum();
        let a = &run.report.aggregate;
        let per: Vec<f64> = run.report.per_core.iter().map(|r| r.cycles as f64).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        let imbalance = per.iter().map(|c| (c - mean).abs() / mean).fold(0.0, f64::max);
        RunMetrics {
            cores: run.report.per_core.len(),
            cycles: a.cycles,
            im2col_cycles: p.im2col,
            matmul_cycles: p.matmul,
            requant_cycles: p.requant,
            simd_macs: a.simd_macs,
            lane_macs: a.lane_macs,
            retired: a.retired,
            contention_stalls: a.contention_stalls,
            branch_penalty_cycles: a.branch_penalty_cycles,
            matmul_cycles_per_mac: p.matmul as f64 / a.simd_macs.max(1) as f64,
            inner_opef: run.dynamic_opef(),
            core_imbalance: imbalance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub layer: String,
    pub bits: u32,
    pub variant: Variant,
    pub static_opef: f64,
    pub single: RunMetrics,
    pub multi: RunMetrics,
}

impl CellResult {
    pub fn key(&self) -> (String, u32, Variant) {
        (self.layer.clone(), self.bits, self.variant)
    }

    pub fn parallel_speedup(&self) -> f64 {
        self.single.cycles as f64 / self.multi.cycles as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub config_hash: String,
    pub cells: Vec<CellResult>,
}

/// First differing element of two tensors of the same shape.
pub fn first_mismatch(got: &QuantTensor, want: &QuantTensor) -> Option<(usize, i32, i32)> {
    let (g, w) = (got.values(), want.values());
    if g.len() != w.len() {
        return Some((g.len().min(w.len()), 0, 0));
    }
    g.iter().zip(&w).enumerate().find(|(_, (a, b))| a != b).map(|(i, (a, b))| (i, *a, *b))
}

/// Layer data shared by every variant of a (layer, bits) pair.
pub fn cell_data(cfg: &BenchConfig, layer_idx: usize, g: ConvGeometry, bits: u32) -> Result<LayerData, BenchError> {
    let seed = cfg.seed ^ ((layer_idx as u64) << 32) ^ bits as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayerData::random(g, bits, cfg.shift, &mut rng).map_err(|e| BenchError::Config(e.to_string()))
}

/// Runs one kernel and verifies it; never returns metrics for a mismatch.
pub fn run_verified(
    v: Variant,
    data: &LayerData,
    golden: &QuantTensor,
    cores: usize,
    banks: usize,
    shift: u32,
    max_cycles: u64,
) -> Result<(KernelPlan, LayerRun), BenchError> {
    let bits = data.out_spec.bits;
    let cell = format!("{} {bits}-bit {v} x{cores}", layer_name(&data.geom));
    let wrap = |source| BenchError::Kernel { cell: cell.clone(), source };
    let plan = KernelPlan::new(v, bits, data.geom, cores, shift).map_err(wrap)?;
    let run = plan.run(data, banks, max_cycles).map_err(wrap)?;
    if let Some((index, got, want)) = first_mismatch(&run.output, golden) {
        return Err(BenchError::Verification { cell, index, got, want });
    }
    Ok((plan, run))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let geoms = cfg.geometries()?;
    let mut jobs = Vec::new();
    for (li, g) in geoms.iter().enumerate() {
        for &b in &cfg.precisions {
            for &v in &cfg.variants {
                if v.supports(b) {
                    jobs.push((li, *g, b, v));
                }
            }
        }
    }
    let mut cells = jobs
        .par_iter()
        .map(|&(li, g, b, v)| {
            let data = cell_data(cfg, li, g, b)?;
            let golden = data.golden().map_err(|e| BenchError::Config(e.to_string()))?;
            let (plan, single) = run_verified(v, &data, &golden, 1, cfg.banks, cfg.shift, cfg.max_cycles)?;
            let (_, multi) = run_verified(v, &data, &golden, cfg.cores, cfg.banks, cfg.shift, cfg.max_cycles)?;
            log::info!("{} {b}-bit {v}: {} cycles on 1 core, {} on {}", layer_name(&g), single.cycles(), multi.cycles(), cfg.cores);
            Ok(CellResult {
                layer: layer_name(&g),
                bits: b,
                variant: v,
                static_opef: plan.static_opef(),
                single: RunMetrics::from_run(&single),
                multi: RunMetrics::from_run(&multi),
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    cells.sort_by_key(|c| c.key());
    Ok(BenchReport { config: cfg.clone(), config_hash: cfg.hash(), cells })
}

impl BenchReport {
    pub fn cell(&self, layer: &str, bits: u32, v: Variant) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.layer == layer && c.bits == bits && c.variant == v)
    }

    /// Single-core whole-layer and MatMul-phase speedups over `simd-4x2`.
    pub fn speedup_vs_simd(&self, c: &CellResult) -> Option<(f64, f64)> {
        let base = self.cell(&c.layer, c.bits, Variant::Simd4x2)?;
        Some((
            base.single.cycles as f64 / c.single.cycles as f64,
            base.single.matmul_cycles as f64 / c.single.matmul_cycles as f64,
        ))
    }

    /// Canonical JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let cells: Vec<Value> = self
            .cells
            .iter()
            .map(|c| {
                let mut v = serde_json::to_value(c).expect("cell serializes");
                v["parallel_speedup"] = json!(c.parallel_speedup());
                if let Some((whole, mm)) = self.speedup_vs_simd(c) {
                    v["speedup_vs_simd"] = json!({ "whole": whole, "matmul": mm });
                }
                v
            })
            .collect();
        let doc = json!({
            "config": self.config,
            "config_hash": self.config_hash,
            "cells": cells,
        });
        // serde_json maps are ordered by key, so the text is canonical
        let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>4} {:<11} {:>11} {:>11} {:>8} {:>7} {:>7} {:>7} {:>8}",
            "layer", "bits", "variant", "cycles_1c", "cycles_nc", "cyc/mac", "opef", "whole", "matmul", "parallel"
        );
        for c in &self.cells {
            let (w, m) = self.speedup_vs_simd(c).unwrap_or((f64::NAN, f64::NAN));
            let _ = writeln!(
                s,
                "{:<20} {:>4} {:<11} {:>11} {:>11} {:>8.3} {:>7.4} {:>6.2}x {:>6.2}x {:>7.2}x",
                c.layer,
                c.bits,
                c.variant.name(),
                c.single.cycles,
                c.multi.cycles,
                c.single.matmul_cycles_per_mac,
                c.single.inner_opef,
                w,
                m,
                c.parallel_speedup()
            );
        }
        let _ = writeln!(s, "config {}", self.config_hash);
        s
    }
}

/// One row of the OPEF ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpefRow {
    pub kernel: String,
    pub bits: u32,
    pub static_opef: f64,
    pub dynamic_opef: f64,
}

/// Static and dynamic inner-loop OPEF for the load-load-mac loop and every
/// variant, measured on a small layer at `bits` (unpack at 4-bit when
/// `bits` is 8).
pub fn opef_ladder(bits: u32) -> Result<Vec<OpefRow>, BenchError> {
    let (s, d) = load_load_mac_opef(64).map_err(|source| BenchError::Kernel { cell: "load-load-mac".into(), source })?;
    let mut rows = vec![OpefRow { kernel: "load-load-mac".into(), bits: 8, static_opef: s, dynamic_opef: d }];
    let geom = ConvGeometry::same(4, 4, 32, 8, 3);
    let cfg = BenchConfig::default();
    for v in Variant::ALL {
        let b = if v.supports(bits) { bits } else { 4 };
        let data = cell_data(&cfg, 0, geom, b)?;
        let golden = data.golden().map_err(|e| BenchError::Config(e.to_string()))?;
        let (plan, run) = run_verified(v, &data, &golden, 1, 16, cfg.shift, 1 << 28)?;
        rows.push(OpefRow { kernel: v.name().into(), bits: b, static_opef: plan.static_opef(), dynamic_opef: run.dynamic_opef() });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_parsing() {
        let g = parse_layer("16x16x32,64x3x3x32").unwrap();
        assert_eq!((g.h_in, g.c_out, g.f, g.pad), (16, 64, 3, 1));
        assert_eq!(layer_name(&g), "16x16x32,64x3x3x32");
        assert!(parse_layer("16x16x32,64x3x3x16").is_err());
        assert!(parse_layer("16x16,64x3x3x32").is_err());
    }

    #[test]
    fn config_toml_and_hash() {
        let c = BenchConfig::from_toml("cores = 4\nprecisions = [8]\nvariants = [\"nn-4x4\"]\n").unwrap();
        assert_eq!(c.cores, 4);
        assert_eq!(c.variants, vec![Variant::Nn4x4]);
        assert_ne!(c.hash(), BenchConfig::default().hash());
        assert_eq!(c.hash(), c.clone().hash());
        assert!(BenchConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn small_bench_is_deterministic() {
        let cfg = BenchConfig {
            variants: vec![Variant::Simd4x2, Variant::Nn4x4],
            precisions: vec![4],
            layers: vec!["4x4x32,8x3x3x32".into()],
            cores: 2,
            ..BenchConfig::default()
        };
        let a = run_bench(&cfg).unwrap();
        let b = run_bench(&cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.to_table().contains("nn-4x4"));
    }
}
