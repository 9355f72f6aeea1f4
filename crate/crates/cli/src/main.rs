//! `hydrocorr`: synthetic sites, training, inference, validation and
//! baseline benchmarks from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 unlearnable data.

mod commands;
mod error;
mod manifest;
mod reference;
mod site;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, LevelFilter};

use commands::{benchmark, infer, synth, train, validate};
use error::exit;

#[derive(Debug, Parser)]
#[command(name = "hydrocorr", version, about = "Gauge-supervised water mapping from SAR time series")]
struct Cli {
    /// Only print errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print per-epoch and per-scene progress.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic site directory.
    Synth(synth::SynthArgs),
    /// Train a network on a site's scenes and gauge series.
    Train(train::TrainArgs),
    /// Write soft (and optionally hard) water masks for every scene.
    Infer(infer::InferArgs),
    /// Score hard masks against DTM, MNDWI or REF_WATER references.
    Validate(validate::ValidateArgs),
    /// Run the baseline segmenters and score them.
    Benchmark(benchmark::BenchmarkArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::INVALID } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet {
        LevelFilter::Error
    } else if cli.verbose {
        LevelFilter::Debug
    } else {
        LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).parse_env("HYDROCORR_LOG").format_timestamp(None).init();

    let result = match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Validate(a) => validate::run(a),
        Command::Benchmark(a) => benchmark::run(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
