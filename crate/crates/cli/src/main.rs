//! `abis`: synthesis, evaluation, benchmarking and serving for the
//! de-duplication engine.
//!
//! Exit codes: 0 success, 2 usage, 3 data or format, 4 runtime.

mod bench;
mod error;
mod evaluate;
mod manifest;
mod serve;
mod synth;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "abis", version, about = "Multi-biometric de-duplication toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic gallery, probe sets and truth registry.
    Synth(synth::SynthArgs),
    /// Calibrate per-modality noise to verification targets.
    Calibrate(synth::CalibrateArgs),
    /// Search labelled probes and report FPIR/FNIR, the DET curve and subset studies.
    DedupEval(evaluate::DedupEvalArgs),
    /// FPIR/FNIR at a fixed threshold over nested gallery sizes.
    Sweep(evaluate::SweepArgs),
    /// Measure search throughput per batch size.
    Bench(bench::BenchArgs),
    /// Run the HTTP service.
    Serve(serve::ServeArgs),
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Calibrate(a) => synth::calibrate(a),
        Command::DedupEval(a) => evaluate::dedup_eval(a),
        Command::Sweep(a) => evaluate::sweep(a),
        Command::Bench(a) => bench::run(a),
        Command::Serve(a) => serve::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
