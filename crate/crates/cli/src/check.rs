//! `verify` and `gradcheck`: formulation equivalence and backward passes
//! against finite differences, both reported as JSON.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use tfla_core::chunkwise::chunkwise_forward;
use tfla_core::gradcheck::{gradcheck, FdConfig};
use tfla_core::parallel::parallel_forward;
use tfla_core::recurrent::run_recurrent;
use tfla_core::stability::probe;
use tfla_core::tiled::{tfla_forward, BlockConfig};
use tfla_core::{make_inputs_with, max_abs_diff, Dims, GateInit, Rng, SequenceInputs, Tensor, Variant};

use crate::output::emit;
use crate::report::RunReport;
use crate::err;

#[derive(Args, Debug, Clone, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value = "sig")]
    pub variant: Variant,
    #[arg(long = "T", default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long = "L", default_value_t = 16)]
    pub chunk: usize,
    #[arg(long, default_value_t = 32)]
    pub dqk: usize,
    #[arg(long, default_value_t = 64)]
    pub dhv: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Tile sizes `B_Lhq,B_Lkv,B_dqk,B_dhv`; default halves each axis where possible.
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "sig")]
    pub variant: Variant,
    #[arg(long = "T", default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long = "L", default_value_t = 4)]
    pub chunk: usize,
    #[arg(long, default_value_t = 4)]
    pub dqk: usize,
    #[arg(long, default_value_t = 4)]
    pub dhv: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub fd_step: f64,
    /// Denominator floor of the relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub floor: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Use a zero upstream gradient.
    #[arg(long)]
    pub zero_dh: bool,
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn half(x: usize) -> usize {
    if x.is_multiple_of(2) {
        x / 2
    } else {
        x
    }
}

/// Parse `a,b,c,d` or derive a tiling that splits every axis once.
pub fn block_config(spec: Option<&str>, d: &Dims) -> Result<BlockConfig, String> {
    let b = match spec {
        Some(s) => {
            let v: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad block size '{p}': {e}")))
                .collect::<Result<_, _>>()?;
            if v.len() != 4 {
                return Err(format!("expected 4 block sizes, got {}", v.len()));
            }
            BlockConfig::new(v[0], v[1], v[2], v[3])
        }
        None => {
            let lhq = half(d.chunk_size);
            BlockConfig::new(lhq, half(lhq), half(d.d_qk), half(d.d_hv))
        }
    };
    b.validate(d).map_err(err)?;
    Ok(b)
}

/// Seeded standard-normal queries, keys, values and gate pre-activations.
pub fn inputs(d: Dims, rng: &mut Rng) -> Result<SequenceInputs, String> {
    let gates = GateInit::Normal { i_mean: 0.0, i_std: 1.0, f_mean: 0.0, f_std: 1.0 };
    make_inputs_with(d, rng, 1.0, gates).map_err(err)
}

fn check_tol(tol: f64) -> Result<(), String> {
    if tol >= 0.0 {
        Ok(())
    } else {
        Err(format!("tolerance must be >= 0, got {tol}"))
    }
}

pub fn verify(a: &VerifyArgs) -> Result<bool, String> {
    check_tol(a.tol)?;
    let d = Dims::new(a.seq_len, a.chunk, a.dqk, a.dhv).with_heads(a.heads, a.batch);
    d.validate_chunked().map_err(err)?;
    let blocks = block_config(a.blocks.as_deref(), &d)?;
    let x = inputs(d, &mut Rng::new(a.seed))?;
    let (outs, stab) = probe(|| -> tfla_core::Result<Vec<(&str, Tensor)>> {
        Ok(vec![
            ("recurrent", run_recurrent(&x, a.variant)?.h_tilde),
            ("parallel", parallel_forward(&x, a.variant)?),
            ("chunkwise", chunkwise_forward(&x, a.variant)?.h_tilde),
            ("tiled", tfla_forward(&x, blocks, a.variant)?.h_tilde),
        ])
    });
    let outs = outs.map_err(err)?;
    let mut metrics = Vec::new();
    for (i, (na, ta)) in outs.iter().enumerate() {
        for (nb, tb) in &outs[i + 1..] {
            metrics.push((format!("max_abs_diff.{na}.{nb}"), max_abs_diff(ta, tb).map_err(err)?));
        }
    }
    metrics.push(("stability_violations".into(), stab.violations as f64));
    let rep = RunReport::new("verify", serde_json::to_value(a).map_err(err)?, metrics, a.tol);
    emit(a.out.as_deref(), &rep.to_json())?;
    Ok(rep.pass)
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<bool, String> {
    if a.seq_len > 32 {
        return Err("gradcheck limited to T<=32".into());
    }
    check_tol(a.tol)?;
    if a.fd_step.is_nan() || a.fd_step <= 0.0 || a.floor.is_nan() || a.floor <= 0.0 {
        return Err("fd_step and floor must be positive".into());
    }
    let d = Dims::new(a.seq_len, a.chunk, a.dqk, a.dhv).with_heads(a.heads, a.batch);
    d.validate_chunked().map_err(err)?;
    let blocks = block_config(a.blocks.as_deref(), &d)?;
    let mut rng = Rng::new(a.seed);
    let x = inputs(d, &mut rng)?;
    let shape = [d.n_batch, d.n_head, d.seq_len, d.d_hv];
    let dh = if a.zero_dh {
        Tensor::zeros(&shape)
    } else {
        Tensor::from_vec(&shape, rng.normal_vec(shape.iter().product(), 0.0, 1.0)).map_err(err)?
    };
    let cfg = FdConfig { step: a.fd_step, floor: a.floor };
    let (rep, stab) = probe(|| gradcheck(&x, a.variant, &dh, blocks, cfg));
    let rep = rep.map_err(err)?;
    let mut metrics = Vec::new();
    for (path, errs) in [("chunkwise", &rep.chunkwise), ("tiled", &rep.tiled)] {
        for (name, e) in errs.entries() {
            metrics.push((format!("max_rel_err.{path}.{name}"), e.max_rel_err));
        }
    }
    metrics.push(("stability_violations".into(), stab.violations as f64));
    let out = RunReport::new("gradcheck", serde_json::to_value(a).map_err(err)?, metrics, a.tol);
    emit(a.out.as_deref(), &out.to_json())?;
    Ok(out.pass)
}
