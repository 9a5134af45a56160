//! `transfer`: gain grid over constant gate pre-activations as CSV.

use std::path::PathBuf;
use std::thread;

use clap::Args;
use serde::Serialize;
use tfla_core::parallel::Normalizer;
use tfla_core::transfer::{linspace, Probe, TransferConfig};
use tfla_core::Variant;

use crate::output::{emit, num, Csv};
use crate::err;

#[derive(Args, Debug, Clone, Serialize)]
pub struct TransferArgs {
    #[arg(long, default_value = "exp")]
    pub variant: Variant,
    #[arg(long, default_value = "default")]
    pub normalizer: Normalizer,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = -12.0, allow_negative_numbers = true)]
    pub i_min: f64,
    #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
    pub i_max: f64,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    pub f_min: f64,
    #[arg(long, default_value_t = 12.0, allow_negative_numbers = true)]
    pub f_max: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long = "T", default_value_t = 512)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 128)]
    pub dqk: usize,
    #[arg(long, default_value_t = 128)]
    pub dhv: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TransferArgs {
    pub fn config(&self) -> TransferConfig {
        TransferConfig {
            variant: self.variant,
            normalizer: self.normalizer,
            eps: self.eps,
            i_range: (self.i_min, self.i_max),
            f_range: (self.f_min, self.f_max),
            steps: self.steps,
            seq_len: self.seq_len,
            d_qk: self.dqk,
            d_hv: self.dhv,
            seed: self.seed,
        }
    }
}

type Row = Vec<(f64, f64)>;

/// Grid rows (one per `i` value) computed on scoped threads; the result does
/// not depend on the thread count.
fn rows(probe: &Probe, i_values: &[f64], f_values: &[f64], threads: usize) -> Result<Vec<Row>, String> {
    let per = i_values.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<Row>, String>> = thread::scope(|s| {
        let handles: Vec<_> = i_values
            .chunks(per)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&i| f_values.iter().map(|&f| probe.point(i, f).map_err(err)).collect::<Result<Row, _>>())
                        .collect::<Result<Vec<Row>, _>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("worker panicked".into()))).collect()
    });
    let mut out = Vec::with_capacity(i_values.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn transfer(a: &TransferArgs) -> Result<bool, String> {
    let cfg = a.config();
    cfg.validate().map_err(err)?;
    if let Some(p) = &a.out {
        // fail on an unwritable path before the scan
        emit(Some(p), "")?;
    }
    let probe = Probe::new(cfg).map_err(err)?;
    let i_values = linspace(cfg.i_range.0, cfg.i_range.1, cfg.steps);
    let f_values = linspace(cfg.f_range.0, cfg.f_range.1, cfg.steps);
    let threads = a.threads.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()));
    let grid = rows(&probe, &i_values, &f_values, threads)?;
    let mut csv = Csv::new(&["i_pre", "f_pre", "gain_before", "gain_after"]);
    for (&i, row) in i_values.iter().zip(&grid) {
        for (&f, &(b, g)) in f_values.iter().zip(row) {
            csv.row([num(i), num(f), num(b), num(g)]);
        }
    }
    emit(a.out.as_deref(), &csv.finish())?;
    Ok(true)
}
