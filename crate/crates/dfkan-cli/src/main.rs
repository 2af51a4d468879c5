//! `dfkan` command line: train, benchmark, gradcheck, analyze, gen-data.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config error,
//! 3 numeric abort.

mod commands;
mod config;
mod pipeline;
mod runio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::AnalyzeArgs;

#[derive(Parser)]
#[command(name = "dfkan", version, about = "Dual-stage KAN trainer and analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write checkpoint, manifest,
    /// and history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $DFKAN_OUT or ./dfkan-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (training itself is sequential).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Run a (dataset x model) suite with repeats and write the comparison
    /// table plus one manifest per run.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel workers over suite cells.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Finite-difference gradient verification of a model config.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an analysis instrument on a completed run.
    Analyze {
        /// Path to the run's manifest file.
        #[arg(long)]
        manifest: PathBuf,
        /// decompose | prune | extract | attention | gradfield
        #[arg(long)]
        instrument: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retention threshold for prune (fraction of baseline R^2).
        #[arg(long, default_value_t = 0.9)]
        retain: f64,
        /// Maximum emitted degree for extract.
        #[arg(long, default_value_t = 8)]
        max_degree: usize,
        /// Hidden-layer index for decompose (default: penultimate).
        #[arg(long)]
        layer: Option<usize>,
        /// Grid resolution for decompose (points) and gradfield (per axis).
        #[arg(long, default_value_t = 201)]
        grid_n: usize,
    },
    /// Export a synthetic dataset as CSV with a provenance sidecar.
    GenData {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Absolute sigma, "auto" (5% of target std), or "default".
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            out,
            seed,
            threads: _,
        } => commands::cmd_train(config, out.clone(), *seed),
        Command::Benchmark {
            config,
            out,
            seed,
            threads,
        } => commands::cmd_benchmark(config, out.clone(), *seed, *threads),
        Command::Gradcheck { config, seed } => commands::cmd_gradcheck(config, *seed),
        Command::Analyze {
            manifest,
            instrument,
            out,
            retain,
            max_degree,
            layer,
            grid_n,
        } => commands::cmd_analyze(
            manifest,
            instrument,
            out.clone(),
            AnalyzeArgs {
                retain: *retain,
                max_degree: *max_degree,
                layer: *layer,
                grid_n: *grid_n,
            },
        ),
        Command::GenData {
            kind,
            n,
            noise,
            seed,
            out,
        } => commands::cmd_gen_data(kind, *n, noise.as_deref(), *seed, out),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::classify_error(&err) as u8)
        }
    }
}
