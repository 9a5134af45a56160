//! `tfla`: verification, gradient checks, transfer scans, cost-model tables
//! and a CPU benchmark. Exit codes: 0 pass, 1 check failure, 2 usage or
//! configuration error.

mod bench;
mod check;
mod output;
mod perf;
mod report;
mod transfer;

use std::fmt::Display;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tfla", version, about = "mLSTM kernels, equivalence checks and cost model")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare recurrent, parallel, chunkwise and tiled outputs.
    Verify(check::VerifyArgs),
    /// Compare backward passes with central finite differences.
    Gradcheck(check::GradcheckArgs),
    /// Gain grid over constant gate pre-activations.
    Transfer(transfer::TransferArgs),
    /// Analytical cost model.
    Perf(perf::PerfArgs),
    /// Median forward wall time per chunk size.
    Bench(bench::BenchArgs),
}

pub(crate) fn err(e: impl Display) -> String {
    e.to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Verify(a) => check::verify(a),
        Command::Gradcheck(a) => check::gradcheck_cmd(a),
        Command::Transfer(a) => transfer::transfer(a),
        Command::Perf(a) => perf::perf(a),
        Command::Bench(a) => bench::bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
