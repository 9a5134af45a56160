//! `bench`: median forward wall time of the chunked kernels per chunk size.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use tfla_core::chunkwise::chunkwise_forward;
use tfla_core::perfmodel::{state_memory_bytes, CostDims, PerfParams};
use tfla_core::tiled::tfla_forward;
use tfla_core::{Dims, Rng, Variant};

use crate::check::{block_config, inputs};
use crate::output::{emit, num, Csv};
use crate::err;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impl {
    Chunkwise,
    Tiled,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long = "impl", value_enum, value_delimiter = ',', default_value = "chunkwise,tiled")]
    pub impls: Vec<Impl>,
    #[arg(long, default_value = "sig")]
    pub variant: Variant,
    #[arg(long = "T", default_value_t = 1024)]
    pub seq_len: usize,
    #[arg(long = "L", value_delimiter = ',', default_value = "16,32,64,128")]
    pub chunks: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub dqk: usize,
    #[arg(long, default_value_t = 64)]
    pub dhv: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench(a: &BenchArgs) -> Result<bool, String> {
    if a.repeats < 3 {
        return Err(format!("repeats must be at least 3, got {}", a.repeats));
    }
    let base = Dims::new(a.seq_len, a.seq_len, a.dqk, a.dhv).with_heads(a.heads, a.batch);
    let x0 = inputs(base, &mut Rng::new(a.seed))?;
    let params = PerfParams::default();
    let mut csv = Csv::new(&["impl", "L", "median_seconds", "peak_bytes_estimate"]);
    for &which in &a.impls {
        for &l in &a.chunks {
            let d = base.with_chunk(l);
            d.validate_chunked().map_err(err)?;
            let x = x0.with_chunk(l);
            let blocks = block_config(None, &d)?;
            let run = || -> Result<(), String> {
                match which {
                    Impl::Chunkwise => chunkwise_forward(&x, a.variant).map(|_| ()).map_err(err),
                    Impl::Tiled => tfla_forward(&x, blocks, a.variant).map(|_| ()).map_err(err),
                }
            };
            for _ in 0..a.warmup {
                run()?;
            }
            let mut times = Vec::with_capacity(a.repeats);
            for _ in 0..a.repeats {
                let t0 = Instant::now();
                run()?;
                times.push(t0.elapsed().as_secs_f64());
            }
            let name = match which {
                Impl::Chunkwise => "chunkwise",
                Impl::Tiled => "tiled",
            };
            let peak = state_memory_bytes(&CostDims::from(d), &params, a.variant);
            csv.row([name.to_string(), l.to_string(), num(median(times)), num(peak)]);
        }
    }
    emit(a.out.as_deref(), &csv.finish())?;
    Ok(true)
}
