mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigFile, Sweep};

#[derive(Parser, Debug)]
#[command(
    name = "heatrank",
    version,
    about = "Heat-diffusion image retrieval pipeline"
)]
pub struct Cli {
    /// Line-oriented key=value file; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for per-image and per-query work.
    #[arg(long, global = true, env = "HEATRANK_THREADS")]
    pub threads: Option<usize>,

    /// Seed for synthetic data (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

/// Pipeline parameters shared by several commands.
#[derive(Args, Debug, Clone, Default)]
pub struct Params {
    /// Dissipation to the environment node (default 1.0).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Power-normalization exponent (default 0.5).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Re-ranking short-list size; 0 disables re-ranking (default 800).
    #[arg(long)]
    pub k: Option<usize>,
    /// Results averaged into the expanded query (default 10).
    #[arg(long)]
    pub n_qe: Option<usize>,
    /// Whitened dimensionality (default 512, capped by the model).
    #[arg(long)]
    pub dims: Option<usize>,
    /// trapezoidal or at-hits.
    #[arg(long)]
    pub ap_variant: Option<String>,
    /// Clamp negative centered similarities to zero during re-ranking (default true).
    #[arg(long)]
    pub clamp: Option<bool>,
    /// hew or suma (default hew).
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dataset of HFT1 tensors and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        images_per_class: usize,
        #[arg(long, default_value_t = 2)]
        queries_per_class: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
    },
    /// Aggregate each HFT1 tensor in a directory into a `.hvec` vector.
    Aggregate {
        #[arg(long, value_name = "DIR")]
        tensors: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        params: Params,
    },
    /// Learn a whitening model from a directory of `.hvec` vectors.
    FitPca {
        #[arg(long, value_name = "DIR")]
        train: Option<PathBuf>,
        /// Output model file.
        #[arg(long, value_name = "FILE")]
        pca: Option<PathBuf>,
    },
    /// Build a search index from a directory of `.hvec` vectors.
    Index {
        #[arg(long, value_name = "DIR")]
        vectors: Option<PathBuf>,
        /// Whitening model; without one the vectors are indexed as they are.
        #[arg(long, value_name = "FILE")]
        pca: Option<PathBuf>,
        /// Output index file.
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        #[command(flatten)]
        params: Params,
    },
    /// Rank the index for every query vector in a directory.
    Query {
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        /// A `.hvec` file or a directory of them.
        #[arg(long, value_name = "PATH")]
        queries: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        pca: Option<PathBuf>,
        /// Write the full ranking of each query to `<DIR>/<query>.txt`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Results printed per query.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        qe: bool,
        #[arg(long)]
        her: bool,
        #[command(flatten)]
        params: Params,
    },
    /// Score query rankings against ground truth.
    Eval {
        #[arg(long, value_name = "DIR")]
        gt: Option<PathBuf>,
        /// Directory of query `.hvec` files named by query id.
        #[arg(long, value_name = "DIR")]
        queries: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        /// Database vectors to index on the fly (instead of --index).
        #[arg(long, value_name = "DIR")]
        vectors: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        pca: Option<PathBuf>,
        /// key=value summary file.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[arg(long)]
        qe: bool,
        #[arg(long)]
        her: bool,
        /// Drop the query image itself from its ranking before scoring.
        #[arg(long)]
        remove_self: bool,
        /// `k=0..800 step 100` or `D=32,64,128,256,512`.
        #[arg(long)]
        sweep: Option<Sweep>,
        #[command(flatten)]
        params: Params,
    },
    /// Time representation and query stages.
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(n) = file.get::<usize>("threads", cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let seed = file.get_or("seed", cli.seed, heatrank::synthetic::DEFAULT_SEED)?;
    commands::dispatch(cli.command, &file, seed)
}
