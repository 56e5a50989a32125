use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use clap::Args;
use heatrank::aggregation::{aggregate, Method, DEFAULT_ALPHA};
use heatrank::diffusion::{heat_weights, similarity_matrix, temperatures_fast, DiffusionConfig};
use heatrank::retrieval::{
    expand_query, rerank_heat, Candidate, Index, QueryOptions, DEFAULT_K, DEFAULT_N_QE,
};
use heatrank::synthetic::{benchmark_map, generate, random_unit_vectors, SyntheticConfig};
use heatrank::tensor_io::{flatten, read_feature_tensor, FeatureSet};
use heatrank::Execution;

use crate::config::ConfigFile;

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Local features per synthetic image.
    #[arg(long, default_value_t = 3072)]
    pub features: usize,
    /// Channels per synthetic feature.
    #[arg(long, default_value_t = 512)]
    pub channels: usize,
    /// Time these HFT1 tensors instead of synthetic features.
    #[arg(long, value_name = "DIR")]
    pub tensors: Option<PathBuf>,
    /// Size of the synthetic database for query timing.
    #[arg(long, default_value_t = 20_000)]
    pub db_size: usize,
    /// Descriptor dimension for query timing.
    #[arg(long, default_value_t = 512)]
    pub dims: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_N_QE)]
    pub n_qe: usize,
    /// Timed repetitions per measurement.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Dissipation values for the sensitivity table.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
    pub lambdas: Vec<f64>,
    /// Run every stage on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Default, Clone, Copy)]
struct StageTimes {
    similarity: Duration,
    temperatures: Duration,
    aggregate: Duration,
}

impl StageTimes {
    fn total(&self) -> Duration {
        self.similarity + self.temperatures + self.aggregate
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn synthetic_features(count: usize, channels: usize, seed: u64) -> Result<FeatureSet> {
    // Convolutional activations are non-negative.
    let flat = random_unit_vectors(count, channels, seed);
    let rows: Vec<Vec<f64>> = flat
        .chunks(channels)
        .map(|r| r.iter().map(|x| x.abs() as f64).collect())
        .collect();
    Ok(FeatureSet::from_vectors(&rows)?)
}

fn time_representation(
    fs: &FeatureSet,
    cfg: &DiffusionConfig,
    exec: Execution,
) -> Result<StageTimes> {
    let t0 = Instant::now();
    let p = similarity_matrix(fs, exec)?;
    let t1 = Instant::now();
    let t = temperatures_fast(&p, cfg, exec)?;
    let t2 = Instant::now();
    let v = aggregate(fs, &heat_weights(&t), DEFAULT_ALPHA)?;
    let t3 = Instant::now();
    std::hint::black_box(v);
    Ok(StageTimes {
        similarity: t1 - t0,
        temperatures: t2 - t1,
        aggregate: t3 - t2,
    })
}

/// Per-stage mean over `reps` runs for every set.
fn mean_representation(
    sets: &[FeatureSet],
    cfg: &DiffusionConfig,
    reps: usize,
    exec: Execution,
) -> Result<StageTimes> {
    let mut acc = StageTimes::default();
    let mut runs = 0u32;
    for _ in 0..reps {
        for fs in sets {
            let t = time_representation(fs, cfg, exec)?;
            acc.similarity += t.similarity;
            acc.temperatures += t.temperatures;
            acc.aggregate += t.aggregate;
            runs += 1;
        }
    }
    Ok(StageTimes {
        similarity: acc.similarity / runs,
        temperatures: acc.temperatures / runs,
        aggregate: acc.aggregate / runs,
    })
}

fn print_stage_row(label: &str, t: &StageTimes) {
    println!(
        "{label:<24} {:>12.3} {:>12.3} {:>12.3} {:>12.3}",
        ms(t.similarity),
        ms(t.temperatures),
        ms(t.aggregate),
        ms(t.total())
    );
}

pub fn run(args: &BenchArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    ensure!(args.reps > 0, "--reps must be at least 1");
    ensure!(
        args.features > 0 && args.channels > 0,
        "--features and --channels must be positive"
    );
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let lambda = file.get_or("lambda", None, 1.0)?;
    let cfg = DiffusionConfig::with_lambda(lambda);
    cfg.validate()?;

    let (label, sets) = match &args.tensors {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "hft"))
                .collect();
            paths.sort();
            ensure!(
                !paths.is_empty(),
                "no .hft tensors found in {}",
                dir.display()
            );
            let sets = paths
                .iter()
                .map(|p| Ok(flatten(&read_feature_tensor(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            (format!("{} tensors", sets.len()), sets)
        }
        None => (
            format!("|V|={} K={}", args.features, args.channels),
            vec![synthetic_features(args.features, args.channels, seed)?],
        ),
    };

    println!("representation per image (ms), lambda={lambda}");
    println!(
        "{:<24} {:>12} {:>12} {:>12} {:>12}",
        "input", "similarity", "temperature", "aggregate", "total"
    );
    print_stage_row(&label, &mean_representation(&sets, &cfg, args.reps, exec)?);
    let single = synthetic_features(1, args.channels, seed)?;
    print_stage_row(
        &format!("|V|=1 K={}", args.channels),
        &mean_representation(std::slice::from_ref(&single), &cfg, args.reps, exec)?,
    );

    println!();
    println!(
        "per query (ms), N={} D={} k={} n_qe={}",
        args.db_size, args.dims, args.k, args.n_qe
    );
    let (search, qe, her) = time_queries(args, &cfg, seed, exec)?;
    println!(
        "{:>12} {:>12} {:>12} {:>12}",
        "search", "qe", "her", "total"
    );
    println!(
        "{:>12.3} {:>12.3} {:>12.3} {:>12.3}",
        ms(search),
        ms(qe),
        ms(her),
        ms(search + qe + her)
    );

    println!();
    println!("lambda sensitivity (representation of the input above; mAP on the seeded synthetic benchmark)");
    println!("{:>8} {:>12} {:>10}", "lambda", "total ms", "mAP");
    let ds = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    });
    for &l in &args.lambdas {
        let cfg = DiffusionConfig::with_lambda(l);
        cfg.validate()?;
        let t = mean_representation(&sets, &cfg, 1, exec)?;
        let map = benchmark_map(
            &ds,
            Method::Hew,
            &cfg,
            DEFAULT_ALPHA,
            &QueryOptions::default(),
            exec,
        )
        .map_err(|e| anyhow::anyhow!("synthetic benchmark failed: {e}"))?;
        println!("{l:>8} {:>12.3} {map:>10.4}", ms(t.total()));
    }
    Ok(())
}

/// Mean search, expansion and re-ranking time over a few queries against a
/// random unit-vector database.
fn time_queries(
    args: &BenchArgs,
    cfg: &DiffusionConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Duration, Duration, Duration)> {
    ensure!(
        args.db_size > 0 && args.dims > 0,
        "--db-size and --dims must be positive"
    );
    let ids = (0..args.db_size).map(|i| format!("img{i:07}")).collect();
    let idx = Index::from_f32(
        ids,
        args.dims,
        random_unit_vectors(args.db_size, args.dims, seed),
    )?;
    let queries = random_unit_vectors(args.reps, args.dims, seed.wrapping_add(1));
    let (mut search, mut qe, mut her) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
    for q in queries.chunks(args.dims) {
        let q = heatrank::aggregation::ImageVector::new(
            q.iter().map(|&x| x as f64).collect(),
            heatrank::aggregation::Stage::Whitened,
        );
        let t0 = Instant::now();
        let first = heatrank::retrieval::search(&idx, &q, exec)?;
        let t1 = Instant::now();
        let expanded = expand_query(&q, &first, &idx, args.n_qe)?;
        let ranked = heatrank::retrieval::search(&idx, &expanded, exec)?;
        let t2 = Instant::now();
        let topk: Vec<Candidate> = ranked
            .entries
            .iter()
            .take(args.k)
            .map(|(id, score)| Candidate {
                id: id.clone(),
                score: *score,
                vector: idx.vector(id).expect("ranked id is indexed").values,
            })
            .collect();
        let t3 = Instant::now();
        std::hint::black_box(rerank_heat(&expanded, &topk, cfg)?);
        let t4 = Instant::now();
        search += t1 - t0;
        qe += t2 - t1;
        her += t4 - t3;
    }
    let n = args.reps as u32;
    Ok((search / n, qe / n, her / n))
}
