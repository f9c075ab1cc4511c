//! `ssmocr` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssmocr_core::bench::TrackingAllocator;
use ssmocr_core::Error;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "ssmocr", version, about = "Selective state-space OCR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (PGM images plus train/valid/test manifests)
    Synth {
        /// Configuration file (`key = value`)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, overrides `data.out_dir`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sample count, overrides `data.samples`
        #[arg(long)]
        samples: Option<usize>,
        /// Seed, overrides `data.seed`
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes last.ckpt, best.ckpt and CSV logs
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overrides `train.out_dir`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress progress output
        #[arg(long)]
        quiet: bool,
    },
    /// Decode a manifest and score it; writes eval.csv and summary.txt
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Lowercase reference and hypothesis before scoring
        #[arg(long)]
        lowercase: bool,
        /// Collapse whitespace runs before scoring
        #[arg(long)]
        collapse_whitespace: bool,
    },
    /// Print one transcript per image, in input order
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM images
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Cache-growth and latency benchmarks; writes CSV and plot data
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, overrides `bench.out_dir`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trained checkpoints to time instead of random initializations
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Combine line-aligned transcription files by weighted character voting
    Rover {
        /// Transcription files with equal line counts
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Comma-separated engine weights (default: all 1)
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, samples, seed } => commands::synth(config.as_deref(), out, samples, seed),
        Command::Train { config, out, resume, quiet } => commands::train(&config, out, resume.as_deref(), quiet),
        Command::Eval { checkpoint, manifest, out, lowercase, collapse_whitespace } => {
            commands::eval(&checkpoint, &manifest, &out, lowercase, collapse_whitespace)
        }
        Command::Decode { checkpoint, images } => commands::decode(&checkpoint, &images),
        Command::Bench { config, out, checkpoint } => commands::bench(config.as_deref(), out, &checkpoint),
        Command::Rover { files, weights } => commands::rover(&files, weights),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
