//! `perf`: cost-model tables as CSV, one row per chunk size.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;
use tfla_core::perfmodel::{
    accelerator_intensity, argmin, arithmetic_intensity, chunk_candidates, flop_optimal_chunk_size, flops,
    flops_chunkwise, lookup_accelerator, memops, roofline, runtime_optimal_chunk_size, runtime_terms,
    theoretical_runtime, AcceleratorSpec, CostDims, CountMode, Formulation, OpFactors, PerfParams, RuntimeBound,
};
use tfla_core::Variant;

use crate::output::{emit, num, Csv};
use crate::err;

#[derive(Args, Debug)]
pub struct PerfArgs {
    #[command(subcommand)]
    pub cmd: PerfCommand,
}

#[derive(Subcommand, Debug)]
pub enum PerfCommand {
    /// FLOP line items per chunk size.
    Flops(FlopsArgs),
    /// Bytes loaded and stored per chunk size.
    Memops(ModelArgs),
    /// Theoretical chunkwise runtime per chunk size.
    Runtime(AccelModelArgs),
    /// Chunkwise arithmetic intensity per chunk size.
    Intensity(AccelModelArgs),
    /// Attainable FLOP rate per chunk size or per given intensity.
    Roofline(RooflineArgs),
    /// Closed-form optimal chunk sizes next to brute-force argmins.
    OptimalChunk(OptimalArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
pub enum ModeArg {
    Exact,
    Simplified,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
pub enum BoundArg {
    Sum,
    Max,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq)]
pub enum Objective {
    Flop,
    Runtime,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "chunkwise")]
    pub formulation: Formulation,
    #[arg(long, default_value = "sig")]
    pub variant: Variant,
    #[arg(long = "T", default_value_t = 8192)]
    pub seq_len: usize,
    /// Comma-separated chunk sizes.
    #[arg(long = "L")]
    pub chunks: Option<String>,
    /// Inclusive integer range `lo:hi` or `lo:hi:step`.
    #[arg(long)]
    pub l_range: Option<String>,
    #[arg(long, default_value_t = 512.0)]
    pub dhv: f64,
    /// Defaults to `pqk * dhv`.
    #[arg(long)]
    pub dqk: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub pqk: f64,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.5)]
    pub fcausal: f64,
    #[arg(long, default_value_t = 2.0)]
    pub bytes_qkv: f64,
    #[arg(long, default_value_t = 2.0)]
    pub bytes_if: f64,
    #[arg(long, default_value_t = 4.0)]
    pub bytes_cmn: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_exp: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_log: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_sig: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_abs: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_mask: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AccelArgs {
    #[arg(long, default_value = "H100 SXM")]
    pub accel: String,
    /// JSON array of `{name, flops_per_s, bytes_per_s}` extending the presets.
    #[arg(long)]
    pub accel_file: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "simplified")]
    pub mode: ModeArg,
}

#[derive(Args, Debug, Clone)]
pub struct AccelModelArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub accel: AccelArgs,
    #[arg(long, value_enum, default_value = "sum")]
    pub bound: BoundArg,
}

#[derive(Args, Debug, Clone)]
pub struct RooflineArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub accel: AccelArgs,
    /// Comma-separated intensities (FLOP/byte) instead of a chunk-size sweep.
    #[arg(long)]
    pub intensity: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimalArgs {
    #[arg(long, default_value_t = 512.0)]
    pub dhv: f64,
    #[arg(long, default_value_t = 0.5)]
    pub pqk: f64,
    #[arg(long, default_value_t = 0.5)]
    pub fcausal: f64,
    #[arg(long, default_value_t = 4.0)]
    pub bytes_cmn: f64,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: Objective,
    /// Restricts the brute-force search to divisors of T; all of 1..=8192 otherwise.
    #[arg(long = "T")]
    pub seq_len: Option<usize>,
    #[command(flatten)]
    pub accel: AccelArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("bad value '{p}': {e}"))).collect()
}

fn parse_range(s: &str) -> Result<Vec<usize>, String> {
    let v: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad range '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    let (lo, hi, step) = match v.as_slice() {
        [lo, hi] => (*lo, *hi, 1),
        [lo, hi, step] => (*lo, *hi, *step),
        _ => return Err(format!("range must be lo:hi or lo:hi:step, got '{s}'")),
    };
    if lo == 0 || hi < lo || step == 0 {
        return Err(format!("invalid range '{s}'"));
    }
    Ok((lo..=hi).step_by(step).collect())
}

impl ModelArgs {
    /// Chunk sizes from `--L`, `--l-range`, or powers of two up to `T`.
    pub fn chunk_sizes(&self) -> Result<Vec<usize>, String> {
        let ls = match (&self.chunks, &self.l_range) {
            (Some(_), Some(_)) => return Err("give either --L or --l-range".into()),
            (Some(s), None) => parse_list(s)?,
            (None, Some(r)) => parse_range(r)?,
            (None, None) => std::iter::successors(Some(1usize), |l| Some(l * 2)).take_while(|l| *l <= self.seq_len).collect(),
        };
        if ls.contains(&0) {
            return Err("chunk sizes must be at least 1".into());
        }
        Ok(ls)
    }

    pub fn params(&self) -> Result<PerfParams, String> {
        let p = PerfParams {
            f_causal: self.fcausal,
            ops: OpFactors { exp: self.f_exp, log: self.f_log, sig: self.f_sig, max: self.f_max, abs: self.f_abs, mask: self.f_mask },
            bytes_qkv: self.bytes_qkv,
            bytes_if: self.bytes_if,
            bytes_cmn: self.bytes_cmn,
        };
        p.validate().map_err(err)?;
        Ok(p)
    }

    pub fn dims(&self, l: usize) -> Result<CostDims, String> {
        let dqk = self.dqk.unwrap_or(self.pqk * self.dhv);
        let d = CostDims::new(self.seq_len as f64, l as f64, dqk, self.dhv).with_heads(self.heads as f64, self.batch as f64);
        d.validate().map_err(err)?;
        Ok(d)
    }
}

pub fn load_accelerators(path: Option<&Path>) -> Result<Vec<AcceleratorSpec>, String> {
    let Some(p) = path else { return Ok(Vec::new()) };
    let text = fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
    let specs: Vec<AcceleratorSpec> = serde_json::from_str(&text).map_err(|e| format!("bad accelerator file: {e}"))?;
    for s in &specs {
        s.validate().map_err(err)?;
    }
    Ok(specs)
}

impl AccelArgs {
    pub fn resolve(&self) -> Result<AcceleratorSpec, String> {
        let extra = load_accelerators(self.accel_file.as_deref())?;
        lookup_accelerator(&self.accel, &extra).map_err(err)
    }
}

fn accel_meta(a: &AcceleratorSpec) -> String {
    format!("accelerator={},accelerator_intensity={}", a.name, accelerator_intensity(a))
}

fn bound(b: BoundArg) -> RuntimeBound {
    match b {
        BoundArg::Sum => RuntimeBound::Sum,
        BoundArg::Max => RuntimeBound::Max,
    }
}

fn cmd_flops(a: &FlopsArgs) -> Result<String, String> {
    let m = &a.model;
    let p = m.params()?;
    let mode = match a.mode {
        ModeArg::Exact => CountMode::Exact,
        ModeArg::Simplified => CountMode::Simplified,
    };
    let mut csv: Option<Csv> = None;
    for l in m.chunk_sizes()? {
        let b = flops(&m.dims(l)?, &p, m.variant, m.formulation, mode);
        let c = csv.get_or_insert_with(|| {
            let mut h = vec!["formulation", "variant", "L"];
            h.extend(b.items.iter().map(|i| i.name.as_str()));
            h.extend(["flops", "bytes_loaded", "bytes_stored"]);
            Csv::new(&h)
        });
        let mut row = vec![m.formulation.to_string(), m.variant.to_string(), l.to_string()];
        row.extend(b.items.iter().map(|i| num(i.flops)));
        row.extend([num(b.flops), num(b.bytes_loaded), num(b.bytes_stored)]);
        c.row(row);
    }
    Ok(csv.map(Csv::finish).unwrap_or_default())
}

fn cmd_memops(m: &ModelArgs) -> Result<String, String> {
    let p = m.params()?;
    let mut csv = Csv::new(&["formulation", "variant", "L", "bytes_loaded", "bytes_stored", "bytes_total"]);
    for l in m.chunk_sizes()? {
        let o = memops(&m.dims(l)?, &p, m.variant, m.formulation);
        csv.row([m.formulation.to_string(), m.variant.to_string(), l.to_string(), num(o.loaded), num(o.stored), num(o.total)]);
    }
    Ok(csv.finish())
}

fn cmd_runtime(a: &AccelModelArgs) -> Result<String, String> {
    let m = &a.model;
    let p = m.params()?;
    let acc = a.accel.resolve()?;
    let ls = m.chunk_sizes()?;
    let b = bound(a.bound);
    let mut rows = Vec::new();
    for &l in &ls {
        let d = m.dims(l)?;
        let (tf, tb) = runtime_terms(&d, &p, m.variant, &acc, l as f64);
        rows.push((l, tf, tb, theoretical_runtime(&d, &p, m.variant, &acc, l as f64, b)));
    }
    let best = rows.iter().min_by(|x, y| x.3.total_cmp(&y.3)).map_or(0, |r| r.0);
    // the published runtime model covers sig; exp reuses its template
    let meta = format!(
        "{},bound={},variant={},extension={},argmin_L={best}",
        accel_meta(&acc),
        match a.bound {
            BoundArg::Sum => "sum",
            BoundArg::Max => "max",
        },
        m.variant,
        m.variant == Variant::Exp
    );
    let mut csv = Csv::with_meta(&meta, &["L", "flop_seconds", "memory_seconds", "runtime_seconds"]);
    for (l, tf, tb, t) in rows {
        csv.row([l.to_string(), num(tf), num(tb), num(t)]);
    }
    Ok(csv.finish())
}

fn cmd_intensity(a: &AccelModelArgs) -> Result<String, String> {
    let m = &a.model;
    let p = m.params()?;
    let acc = a.accel.resolve()?;
    let meta = format!("{},variant={},extension={}", accel_meta(&acc), m.variant, m.variant == Variant::Exp);
    let mut csv = Csv::with_meta(&meta, &["L", "arithmetic_intensity", "regime"]);
    for l in m.chunk_sizes()? {
        let i = arithmetic_intensity(&m.dims(l)?, &p, m.variant, l as f64);
        let regime = if i < accelerator_intensity(&acc) { "memory" } else { "compute" };
        csv.row([l.to_string(), num(i), regime.to_string()]);
    }
    Ok(csv.finish())
}

fn cmd_roofline(a: &RooflineArgs) -> Result<String, String> {
    let acc = a.accel.resolve()?;
    let meta = accel_meta(&acc);
    match &a.intensity {
        Some(list) => {
            let mut csv = Csv::with_meta(&meta, &["arithmetic_intensity", "attainable_flops_per_s", "fraction_of_peak"]);
            for i in parse_list::<f64>(list)? {
                let r = roofline(&acc, i).map_err(err)?;
                csv.row([num(i), num(r), num(r / acc.flops_per_s)]);
            }
            Ok(csv.finish())
        }
        None => {
            let m = &a.model;
            let p = m.params()?;
            let mut csv =
                Csv::with_meta(&meta, &["L", "arithmetic_intensity", "attainable_flops_per_s", "fraction_of_peak"]);
            for l in m.chunk_sizes()? {
                let i = arithmetic_intensity(&m.dims(l)?, &p, m.variant, l as f64);
                let r = roofline(&acc, i).map_err(err)?;
                csv.row([l.to_string(), num(i), num(r), num(r / acc.flops_per_s)]);
            }
            Ok(csv.finish())
        }
    }
}

fn cmd_optimal(a: &OptimalArgs) -> Result<String, String> {
    if !(a.dhv > 0.0 && a.pqk > 0.0) {
        return Err("dhv and pqk must be positive".into());
    }
    let p = PerfParams { f_causal: a.fcausal, bytes_cmn: a.bytes_cmn, ..PerfParams::default() };
    p.validate().map_err(err)?;
    let acc = a.accel.resolve()?;
    let t = a.seq_len.unwrap_or(8192) as f64;
    let base = CostDims::new(t, 1.0, a.pqk * a.dhv, a.dhv);
    let cands = chunk_candidates(a.seq_len);
    let mut csv = Csv::with_meta(&accel_meta(&acc), &["objective", "closed_form", "brute_force_argmin"]);
    if a.mode != Objective::Runtime {
        let closed = flop_optimal_chunk_size(a.dhv, a.pqk, a.fcausal);
        let best = argmin(&cands, |l| flops_chunkwise(&base.with_chunk(l), &p, Variant::Sig, CountMode::Simplified).flops);
        csv.row(["flop".to_string(), num(closed), best.map_or(String::new(), |b| b.to_string())]);
    }
    if a.mode != Objective::Flop {
        let closed = runtime_optimal_chunk_size(a.dhv, a.pqk, a.fcausal, a.bytes_cmn, accelerator_intensity(&acc));
        let best = argmin(&cands, |l| theoretical_runtime(&base, &p, Variant::Sig, &acc, l, RuntimeBound::Sum));
        csv.row(["runtime".to_string(), num(closed), best.map_or(String::new(), |b| b.to_string())]);
    }
    Ok(csv.finish())
}

pub fn perf(a: &PerfArgs) -> Result<bool, String> {
    let (text, out) = match &a.cmd {
        PerfCommand::Flops(x) => (cmd_flops(x)?, &x.model.out),
        PerfCommand::Memops(x) => (cmd_memops(x)?, &x.out),
        PerfCommand::Runtime(x) => (cmd_runtime(x)?, &x.model.out),
        PerfCommand::Intensity(x) => (cmd_intensity(x)?, &x.model.out),
        PerfCommand::Roofline(x) => (cmd_roofline(x)?, &x.model.out),
        PerfCommand::OptimalChunk(x) => (cmd_optimal(x)?, &x.out),
    };
    emit(out.as_deref(), &text)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_lists() {
        assert_eq!(parse_range("2:8:3").unwrap(), vec![2, 5, 8]);
        assert_eq!(parse_range("1:3").unwrap(), vec![1, 2, 3]);
        assert!(parse_range("0:3").is_err());
        assert!(parse_range("4:3").is_err());
        assert_eq!(parse_list::<usize>("16, 32").unwrap(), vec![16, 32]);
        assert!(parse_list::<usize>("16,x").is_err());
    }
}
