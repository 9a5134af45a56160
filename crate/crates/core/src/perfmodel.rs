//! Analytical cost model: FLOP and memory-operation counts for the three
//! formulations, optimal chunk sizes, theoretical runtime, arithmetic
//! intensity and roofline.
//!
//! Counts are for a forward pass. Recomputation inside kernels and the
//! initial/final state traffic are not counted. Line items are evaluated per
//! head and chunk (chunkwise), per head and sequence (parallel) or per head
//! and step (recurrent) and then scaled to the whole batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Chunkwise,
    Parallel,
    Recurrent,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::Chunkwise, Formulation::Parallel, Formulation::Recurrent];

    pub fn as_str(&self) -> &'static str {
        match self {
            Formulation::Chunkwise => "chunkwise",
            Formulation::Parallel => "parallel",
            Formulation::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown formulation '{s}'")))
    }
}

/// `Exact` keeps the per-operation factors, `Simplified` pins them to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Exact,
    Simplified,
}

/// FLOPs charged per pointwise operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpFactors {
    pub exp: f64,
    pub log: f64,
    pub sig: f64,
    pub max: f64,
    pub abs: f64,
    pub mask: f64,
}

impl OpFactors {
    pub const ONES: OpFactors = OpFactors { exp: 1.0, log: 1.0, sig: 1.0, max: 1.0, abs: 1.0, mask: 1.0 };
}

impl Default for OpFactors {
    fn default() -> Self {
        OpFactors::ONES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    /// Fraction of the quadratic work actually computed, in `[0.5, 1]`.
    pub f_causal: f64,
    pub ops: OpFactors,
    pub bytes_qkv: f64,
    pub bytes_if: f64,
    pub bytes_cmn: f64,
}

impl Default for PerfParams {
    fn default() -> Self {
        PerfParams { f_causal: 0.5, ops: OpFactors::ONES, bytes_qkv: 2.0, bytes_if: 2.0, bytes_cmn: 4.0 }
    }
}

impl PerfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.f_causal) {
            return Err(Error::Parameter(format!("F_causal must be in [0.5, 1], got {}", self.f_causal)));
        }
        for (name, b) in [("bytes_qkv", self.bytes_qkv), ("bytes_if", self.bytes_if), ("bytes_cmn", self.bytes_cmn)] {
            if b != 2.0 && b != 4.0 {
                return Err(Error::Parameter(format!("{name} must be 2 or 4, got {b}")));
            }
        }
        Ok(())
    }

    fn factors(&self, mode: CountMode) -> OpFactors {
        match mode {
            CountMode::Exact => self.ops,
            CountMode::Simplified => OpFactors::ONES,
        }
    }
}

/// Real-valued geometry; the chunk size may be fractional for the closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDims {
    pub seq_len: f64,
    pub chunk_size: f64,
    pub d_qk: f64,
    pub d_hv: f64,
    pub n_head: f64,
    pub n_batch: f64,
}

impl CostDims {
    pub fn new(seq_len: f64, chunk_size: f64, d_qk: f64, d_hv: f64) -> Self {
        CostDims { seq_len, chunk_size, d_qk, d_hv, n_head: 1.0, n_batch: 1.0 }
    }

    pub fn with_heads(mut self, n_head: f64, n_batch: f64) -> Self {
        self.n_head = n_head;
        self.n_batch = n_batch;
        self
    }

    pub fn with_chunk(mut self, chunk_size: f64) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn p_qk(&self) -> f64 {
        self.d_qk / self.d_hv
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.seq_len, self.chunk_size, self.d_qk, self.d_hv, self.n_head, self.n_batch];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("cost geometry must be positive: {self:?}")))
        }
    }
}

impl From<Dims> for CostDims {
    fn from(d: Dims) -> Self {
        CostDims {
            seq_len: d.seq_len as f64,
            chunk_size: d.chunk_size as f64,
            d_qk: d.d_qk as f64,
            d_hv: d.d_hv as f64,
            n_head: d.n_head as f64,
            n_batch: d.n_batch as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineItem {
    pub name: String,
    pub flops: f64,
}

/// Named FLOP line items plus memory traffic, all scaled to the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub formulation: Formulation,
    pub variant: Variant,
    pub items: Vec<LineItem>,
    pub flops: f64,
    pub bytes_loaded: f64,
    pub bytes_stored: f64,
}

impl CostBreakdown {
    pub fn item(&self, name: &str) -> Option<f64> {
        self.items.iter().find(|i| i.name == name).map(|i| i.flops)
    }

    pub fn bytes(&self) -> f64 {
        self.bytes_loaded + self.bytes_stored
    }
}

/// Number of per-unit repetitions of each formulation's line items.
fn units(d: &CostDims, f: Formulation) -> f64 {
    let per_head = d.n_head * d.n_batch;
    match f {
        Formulation::Chunkwise => per_head * d.seq_len / d.chunk_size,
        Formulation::Parallel => per_head,
        Formulation::Recurrent => per_head * d.seq_len,
    }
}

fn chunkwise_items(d: &CostDims, p: &PerfParams, v: Variant, o: OpFactors) -> Vec<(&'static str, f64)> {
    let (l, dk, dv, fc) = (d.chunk_size, d.d_qk, d.d_hv, p.f_causal);
    let dd = dk * dv;
    let tri = 0.5 * l * (l + 1.0);
    let numerator = 2.0 * dd + 2.0 * l * dd + l * dk;
    let intra = fc * (2.0 * l * l * (dk + dv) + 3.0 * l * l);
    match v {
        Variant::Exp => vec![
            ("gates", 2.0 * l + tri + l * (1.0 + o.exp + o.log + o.sig) + 3.0 + o.max + o.exp),
            ("numerator", numerator),
            ("denominator", 2.0 * dk + 2.0 * l * dk),
            ("cum_forget", tri + l * (o.log + o.sig)),
            ("gate_matrix", fc * (l * l * (3.0 + o.exp + o.max) + l * (1.0 + o.max))),
            ("intra_outputs", intra),
            ("inter_outputs", 2.0 * l * dd + 3.0 * l * dk),
            ("combination", 2.0 * l * dv + l * (1.0 + o.max + o.abs + o.exp)),
        ],
        Variant::Sig => vec![
            ("gates", 2.0 * l + tri + l * o.exp + o.exp + 2.0 * l * (o.log + o.sig)),
            ("numerator", numerator),
            ("denominator", 0.0),
            ("cum_forget", tri + 2.0 * l * (o.log + o.sig)),
            ("gate_matrix", fc * l * l * (2.0 + o.exp)),
            ("intra_outputs", intra),
            ("inter_outputs", 2.0 * l * dd + l * dk),
            ("combination", l * dv),
        ],
    }
}

fn parallel_items(d: &CostDims, p: &PerfParams, v: Variant, o: OpFactors) -> Vec<(&'static str, f64)> {
    let (t, dk, dv, fc) = (d.seq_len, d.d_qk, d.d_hv, p.f_causal);
    let tri = 0.5 * t * (t + 1.0);
    let gate_matrix = t * t * (3.0 + o.exp + o.max + o.mask);
    let logits = fc * (2.0 * t * t * dk + 2.0 * t * t);
    let outputs = fc * 2.0 * t * t * dv;
    match v {
        Variant::Exp => vec![
            ("cum_forget", tri + t * (o.log + o.sig)),
            ("gate_matrix", gate_matrix),
            ("attention_logits", logits),
            ("normalization", fc * (t * t * (3.0 + o.abs) + t * (o.exp + o.max))),
            ("outputs", outputs),
        ],
        Variant::Sig => vec![
            ("cum_forget", tri + 2.0 * t * (o.log + o.sig)),
            ("gate_matrix", gate_matrix),
            ("attention_logits", logits),
            ("normalization", 0.0),
            ("outputs", outputs),
        ],
    }
}

fn recurrent_items(d: &CostDims, v: Variant, o: OpFactors) -> Vec<(&'static str, f64)> {
    let (dk, dv) = (d.d_qk, d.d_hv);
    let dd = dk * dv;
    match v {
        Variant::Exp => vec![
            ("gates", 4.0 + 2.0 * o.exp + o.log + o.sig + o.max),
            ("memory_update", 4.0 * dd),
            ("denominator_scale", 6.0 * dk + dv + 1.0 + o.abs + o.max),
            ("output", 2.0 * dd + dk),
        ],
        Variant::Sig => vec![
            ("gates", 2.0 * o.sig),
            ("memory_update", 4.0 * dd),
            ("denominator_scale", 0.0),
            ("output", 2.0 * dd + dk),
        ],
    }
}

/// Bytes loaded and stored, scaled to the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemOps {
    pub loaded: f64,
    pub stored: f64,
    pub total: f64,
}

/// Load and store counts per unit (head-chunk, head-sequence or head-step).
fn memops_unit(d: &CostDims, p: &PerfParams, v: Variant, f: Formulation) -> (f64, f64) {
    let (dk, dv) = (d.d_qk, d.d_hv);
    let (bq, bi, bc) = (p.bytes_qkv, p.bytes_if, p.bytes_cmn);
    let state = match v {
        Variant::Exp => dk * dv + dk + 1.0,
        Variant::Sig => dk * dv,
    };
    let norm_out = match v {
        Variant::Exp => 2.0,
        Variant::Sig => 0.0,
    };
    match f {
        Formulation::Chunkwise => {
            let l = d.chunk_size;
            let inter_load = l * (dk + dv) * bq + 2.0 * l * bi;
            let inter_store = state * bc;
            let intra_load = l * (2.0 * dk + dv) * bq + 2.0 * l * bi + state * bc;
            let intra_store = l * dv * bq + norm_out * l * bc;
            (inter_load + intra_load, inter_store + intra_store)
        }
        Formulation::Parallel => {
            let t = d.seq_len;
            (t * (2.0 * dk + dv) * bq + 2.0 * t * bi, t * dv * bq + norm_out * t * bc)
        }
        Formulation::Recurrent => ((2.0 * dk + dv) * bq + 2.0 * bi + state * bc, dv * bq + state * bc),
    }
}

pub fn memops(d: &CostDims, p: &PerfParams, v: Variant, f: Formulation) -> MemOps {
    let (l, s) = memops_unit(d, p, v, f);
    let u = units(d, f);
    MemOps { loaded: l * u, stored: s * u, total: (l + s) * u }
}

fn breakdown(d: &CostDims, p: &PerfParams, v: Variant, f: Formulation, mode: CountMode) -> CostBreakdown {
    let o = p.factors(mode);
    let raw = match f {
        Formulation::Chunkwise => chunkwise_items(d, p, v, o),
        Formulation::Parallel => parallel_items(d, p, v, o),
        Formulation::Recurrent => recurrent_items(d, v, o),
    };
    let u = units(d, f);
    let items: Vec<LineItem> = raw.into_iter().map(|(n, x)| LineItem { name: n.to_string(), flops: x * u }).collect();
    let flops = items.iter().map(|i| i.flops).sum();
    let m = memops(d, p, v, f);
    CostBreakdown { formulation: f, variant: v, items, flops, bytes_loaded: m.loaded, bytes_stored: m.stored }
}

pub fn flops_chunkwise(d: &CostDims, p: &PerfParams, v: Variant, mode: CountMode) -> CostBreakdown {
    breakdown(d, p, v, Formulation::Chunkwise, mode)
}

pub fn flops_parallel(d: &CostDims, p: &PerfParams, v: Variant, mode: CountMode) -> CostBreakdown {
    breakdown(d, p, v, Formulation::Parallel, mode)
}

pub fn flops_recurrent(d: &CostDims, p: &PerfParams, v: Variant, mode: CountMode) -> CostBreakdown {
    breakdown(d, p, v, Formulation::Recurrent, mode)
}

pub fn flops(d: &CostDims, p: &PerfParams, v: Variant, f: Formulation, mode: CountMode) -> CostBreakdown {
    breakdown(d, p, v, f, mode)
}

/// Published closed-form simplified totals, scaled to the batch. They are
/// kept separate from the line items because the two disagree in a few
/// lower-order terms.
pub fn flops_total_closed_form(d: &CostDims, f_causal: f64, v: Variant, f: Formulation) -> f64 {
    let (t, l, dk, dv, fc) = (d.seq_len, d.chunk_size, d.d_qk, d.d_hv, f_causal);
    let dd = dk * dv;
    let per_head = match (f, v) {
        (Formulation::Chunkwise, Variant::Exp) => {
            t * l * fc * (2.0 * (dk + dv) + 8.0)
                + t * l
                + 2.0 * t * fc
                + t * (4.0 * dd + 6.0 * dk + 4.0 * dv + 13.0)
                + t / l * (2.0 * dd + 2.0 * dk + 5.0)
        }
        (Formulation::Chunkwise, Variant::Sig) => {
            t * l * fc * (2.0 * (dk + dv) + 6.0) + t * l + t * (4.0 * dd + 2.0 * dk + dv + 11.0) + t / l * (2.0 * dd + 5.0)
        }
        (Formulation::Parallel, Variant::Exp) => {
            t * t * fc * (2.0 * (dk + dv) + 6.0) + 2.0 * t * fc + 6.5 * t * t + 2.5 * t
        }
        (Formulation::Parallel, Variant::Sig) => t * t * fc * (2.0 * (dk + dv) + 2.0) + 6.5 * t * t + 4.5 * t,
        (Formulation::Recurrent, Variant::Exp) => t * (6.0 * dd + 7.0 * dk + dv + 12.0),
        (Formulation::Recurrent, Variant::Sig) => t * (6.0 * dd + dk + 2.0),
    };
    per_head * d.n_head * d.n_batch
}

/// Chunk size minimizing the closed-form sig chunkwise FLOP total.
pub fn flop_optimal_chunk_size(d_hv: f64, p_qk: f64, f_causal: f64) -> f64 {
    ((2.0 * d_hv * d_hv * p_qk + 5.0) / (2.0 * f_causal * (d_hv * (1.0 + p_qk) + 3.0) + 1.0)).sqrt()
}

/// Chunk size minimizing the sum-mode theoretical runtime of sig.
pub fn runtime_optimal_chunk_size(d_hv: f64, p_qk: f64, f_causal: f64, bytes_cmn: f64, i_acc: f64) -> f64 {
    let d2p = d_hv * d_hv * p_qk;
    ((2.0 * d2p + 5.0 + 2.0 * i_acc * d2p * bytes_cmn) / (2.0 * f_causal * (d_hv * (1.0 + p_qk) + 3.0) + 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorSpec {
    pub name: String,
    pub flops_per_s: f64,
    pub bytes_per_s: f64,
}

impl AcceleratorSpec {
    pub fn new(name: &str, flops_per_s: f64, bytes_per_s: f64) -> Result<Self> {
        let a = AcceleratorSpec { name: name.to_string(), flops_per_s, bytes_per_s };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.flops_per_s > 0.0 && self.bytes_per_s > 0.0 && self.flops_per_s.is_finite() && self.bytes_per_s.is_finite() {
            Ok(())
        } else {
            Err(Error::Registry(format!("accelerator '{}' needs positive throughput and bandwidth", self.name)))
        }
    }
}

/// Preset accelerators: bf16 dense throughput and HBM bandwidth.
pub fn accelerator_registry() -> Vec<AcceleratorSpec> {
    [("V100 SXM2", 120e12, 0.9e12), ("A100 SXM", 312e12, 1.935e12), ("H100 SXM", 989e12, 3.35e12), ("B200 HGX", 2250e12, 7.7e12)]
        .into_iter()
        .map(|(n, f, b)| AcceleratorSpec { name: n.to_string(), flops_per_s: f, bytes_per_s: b })
        .collect()
}

/// Find `name` among user entries first, then the presets.
pub fn lookup_accelerator(name: &str, extra: &[AcceleratorSpec]) -> Result<AcceleratorSpec> {
    extra
        .iter()
        .cloned()
        .chain(accelerator_registry())
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Registry(format!("unknown accelerator '{name}'")))
}

pub fn accelerator_intensity(a: &AcceleratorSpec) -> f64 {
    a.flops_per_s / a.bytes_per_s
}

/// `min(beta * I, alpha)`.
pub fn roofline(a: &AcceleratorSpec, intensity: f64) -> Result<f64> {
    if !(intensity >= 0.0) {
        return Err(Error::Parameter(format!("intensity must be >= 0, got {intensity}")));
    }
    Ok((a.bytes_per_s * intensity).min(a.flops_per_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeBound {
    /// No overlap of compute and memory traffic.
    Sum,
    /// Perfect overlap.
    Max,
}

/// Compute and memory time of the chunkwise forward at chunk size `l`, from
/// the closed-form FLOP total and the chunkwise memory counts. For exp this
/// substitutes its own totals into the sig template.
pub fn runtime_terms(d: &CostDims, p: &PerfParams, v: Variant, a: &AcceleratorSpec, l: f64) -> (f64, f64) {
    let d = d.with_chunk(l);
    let fl = flops_total_closed_form(&d, p.f_causal, v, Formulation::Chunkwise);
    let by = memops(&d, p, v, Formulation::Chunkwise).total;
    (fl / a.flops_per_s, by / a.bytes_per_s)
}

pub fn theoretical_runtime(d: &CostDims, p: &PerfParams, v: Variant, a: &AcceleratorSpec, l: f64, bound: RuntimeBound) -> f64 {
    let (tf, tb) = runtime_terms(d, p, v, a, l);
    match bound {
        RuntimeBound::Sum => tf + tb,
        RuntimeBound::Max => tf.max(tb),
    }
}

/// FLOPs per byte of the chunkwise forward at chunk size `l`.
pub fn arithmetic_intensity(d: &CostDims, p: &PerfParams, v: Variant, l: f64) -> f64 {
    let d = d.with_chunk(l);
    flops_total_closed_form(&d, p.f_causal, v, Formulation::Chunkwise) / memops(&d, p, v, Formulation::Chunkwise).total
}

/// Bytes of materialized inter-chunk states (initial state excluded).
pub fn state_memory_bytes(d: &CostDims, p: &PerfParams, v: Variant) -> f64 {
    let per = match v {
        Variant::Exp => d.d_qk * d.d_hv + d.d_qk + 1.0,
        Variant::Sig => d.d_qk * d.d_hv,
    };
    d.n_batch * d.n_head * (d.seq_len / d.chunk_size).ceil() * per * p.bytes_cmn
}

/// Integer chunk sizes searched by the brute-force oracles: divisors of `T`
/// when a sequence length is given, else `1..=8192`.
pub fn chunk_candidates(seq_len: Option<usize>) -> Vec<usize> {
    match seq_len {
        Some(t) => (1..=t).filter(|l| t % l == 0).collect(),
        None => (1..=8192).collect(),
    }
}

/// Candidate with the smallest objective; the first one wins ties.
pub fn argmin(candidates: &[usize], f: impl Fn(f64) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &l in candidates {
        let y = f(l as f64);
        if best.is_none_or(|(_, b)| y < b) {
            best = Some((l, y));
        }
    }
    best.map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig64() -> CostDims {
        CostDims::new(64.0, 64.0, 64.0, 64.0)
    }

    #[test]
    fn recurrent_sig_single_step() {
        let d = CostDims::new(1.0, 1.0, 64.0, 64.0);
        let b = flops_recurrent(&d, &PerfParams::default(), Variant::Sig, CountMode::Simplified);
        assert_eq!(b.flops, 24_642.0);
        assert_eq!(flops_total_closed_form(&d, 0.5, Variant::Sig, Formulation::Recurrent), 24_642.0);
    }

    #[test]
    fn totals_are_sums_of_items() {
        let p = PerfParams { ops: OpFactors { exp: 3.0, log: 2.0, sig: 1.5, max: 1.0, abs: 1.0, mask: 2.0 }, ..PerfParams::default() };
        let d = CostDims::new(256.0, 32.0, 32.0, 64.0).with_heads(4.0, 2.0);
        for f in Formulation::ALL {
            for v in [Variant::Exp, Variant::Sig] {
                let b = flops(&d, &p, v, f, CountMode::Exact);
                let s: f64 = b.items.iter().map(|i| i.flops).sum();
                assert_eq!(b.flops, s);
                assert!(b.items.iter().all(|i| i.flops >= 0.0));
            }
        }
    }

    #[test]
    fn simplified_ignores_op_factors() {
        let p = PerfParams { ops: OpFactors { exp: 9.0, ..OpFactors::ONES }, ..PerfParams::default() };
        let d = sig64();
        let a = flops_chunkwise(&d, &p, Variant::Exp, CountMode::Simplified);
        let b = flops_chunkwise(&d, &PerfParams::default(), Variant::Exp, CountMode::Exact);
        assert_eq!(a, b);
        assert!(flops_chunkwise(&d, &p, Variant::Exp, CountMode::Exact).flops > a.flops);
    }

    #[test]
    fn memops_chunkwise_sig_example() {
        let d = CostDims::new(64.0, 64.0, 128.0, 256.0);
        let m = memops(&d, &PerfParams::default(), Variant::Sig, Formulation::Chunkwise);
        assert_eq!(m.total, 410_112.0);
    }

    #[test]
    fn memops_parallel_and_recurrent_rows() {
        let p = PerfParams::default();
        let d = CostDims::new(100.0, 1.0, 16.0, 32.0);
        let par = memops(&d, &p, Variant::Sig, Formulation::Parallel);
        assert_eq!(par.total, 2.0 * 100.0 * (2.0 + 48.0 * 2.0));
        let one = CostDims::new(1.0, 1.0, 16.0, 32.0);
        let rec = memops(&one, &p, Variant::Exp, Formulation::Recurrent);
        assert!(rec.stored >= 16.0 * 32.0 * 4.0);
        assert_eq!(rec.total, 2.0 * 2.0 + 2.0 * 48.0 * 2.0 + 2.0 * (512.0 + 17.0) * 4.0);
    }

    #[test]
    fn optimal_chunk_examples() {
        let l = flop_optimal_chunk_size(512.0, 0.5, 0.66);
        assert!((15.0..=17.0).contains(&l), "{l}");
        assert!((flop_optimal_chunk_size(512.0, 0.5, 0.5) - 18.4).abs() < 0.05);
        assert_eq!(runtime_optimal_chunk_size(512.0, 0.5, 0.5, 4.0, 0.0), flop_optimal_chunk_size(512.0, 0.5, 0.5));
        let r = runtime_optimal_chunk_size(512.0, 0.5, 0.5, 4.0, 295.0);
        assert!((r - 633.0).abs() < 1.0, "{r}");
        assert!(runtime_optimal_chunk_size(512.0, 0.5, 0.5, 4.0, 161.0) < r);
    }

    #[test]
    fn registry_lookup() {
        let h = lookup_accelerator("H100 SXM", &[]).unwrap();
        assert_eq!((h.flops_per_s, h.bytes_per_s), (989e12, 3.35e12));
        let b = lookup_accelerator("B200 HGX", &[]).unwrap();
        assert_eq!((b.flops_per_s, b.bytes_per_s), (2250e12, 7.7e12));
        assert!(matches!(lookup_accelerator("TPU", &[]), Err(Error::Registry(_))));
        let mine = AcceleratorSpec::new("H100 SXM", 1.0, 1.0).unwrap();
        assert_eq!(lookup_accelerator("H100 SXM", &[mine]).unwrap().flops_per_s, 1.0);
        assert!(AcceleratorSpec::new("bad", 0.0, 1.0).is_err());
    }

    #[test]
    fn roofline_examples() {
        let h = lookup_accelerator("H100 SXM", &[]).unwrap();
        assert_eq!(roofline(&h, 0.0).unwrap(), 0.0);
        assert!((roofline(&h, accelerator_intensity(&h)).unwrap() / h.flops_per_s - 1.0).abs() < 1e-12);
        assert!((roofline(&h, 100.0).unwrap() - 3.35e14).abs() < 1.0);
        assert!(roofline(&h, -1.0).is_err());
    }

    #[test]
    fn runtime_bounds() {
        let h = lookup_accelerator("H100 SXM", &[]).unwrap();
        let d = CostDims::new(8192.0, 64.0, 256.0, 512.0).with_heads(8.0, 8.0);
        let p = PerfParams::default();
        for l in [16.0, 64.0, 256.0, 1024.0] {
            let s = theoretical_runtime(&d, &p, Variant::Sig, &h, l, RuntimeBound::Sum);
            let m = theoretical_runtime(&d, &p, Variant::Sig, &h, l, RuntimeBound::Max);
            assert!(s >= m);
        }
        let fast_mem = AcceleratorSpec::new("x", h.flops_per_s, f64::INFINITY);
        assert!(fast_mem.is_err());
        let (tf, _) = runtime_terms(&d, &p, Variant::Sig, &h, 64.0);
        let huge = AcceleratorSpec { name: "x".into(), flops_per_s: h.flops_per_s, bytes_per_s: 1e300 };
        let t = theoretical_runtime(&d, &p, Variant::Sig, &huge, 64.0, RuntimeBound::Sum);
        assert!((t - tf).abs() <= 1e-12 * tf);
    }

    #[test]
    fn params_validation() {
        assert!(PerfParams::default().validate().is_ok());
        assert!(PerfParams { f_causal: 0.4, ..PerfParams::default() }.validate().is_err());
        assert!(PerfParams { bytes_cmn: 3.0, ..PerfParams::default() }.validate().is_err());
    }

    #[test]
    fn candidates_and_argmin() {
        assert_eq!(chunk_candidates(Some(12)), vec![1, 2, 3, 4, 6, 12]);
        assert_eq!(chunk_candidates(None).len(), 8192);
        assert_eq!(argmin(&[1, 2, 3, 4], |l| (l - 2.6).powi(2)), Some(3));
        assert_eq!(argmin(&[], |l| l), None);
    }

    #[test]
    fn state_memory_shrinks_with_chunk_size() {
        let p = PerfParams::default();
        let base = CostDims::new(1024.0, 16.0, 64.0, 64.0);
        let a = state_memory_bytes(&base, &p, Variant::Exp);
        let b = state_memory_bytes(&base.with_chunk(64.0), &p, Variant::Exp);
        assert!(b < a);
        assert_eq!(b, 16.0 * (64.0 * 64.0 + 65.0) * 4.0);
    }
}
