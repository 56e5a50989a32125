//! Seeded synthetic retrieval datasets with planted burstiness.
//!
//! Every class owns a few sparse non-negative "part" prototypes. An image
//! shows a handful of noisy part instances from its class plus a large
//! burst of near-duplicate clutter drawn from a pool shared by all classes,
//! so clutter says nothing about the class but dominates an unweighted sum.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregation::{aggregate_batch, ImageVector, Method};
use crate::diffusion::DiffusionConfig;
use crate::evaluation::{mean_average_precision, ApVariant, GroundTruth};
use crate::exec::Execution;
use crate::retrieval::{build_index, full_query, QueryOptions};
use crate::tensor_io::{flatten, write_feature_tensor, FeatureTensor, TensorError};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub queries_per_class: usize,
    /// Channel count `K`.
    pub channels: usize,
    pub parts_per_class: usize,
    /// Inclusive range of part instances per image.
    pub distinctive: (usize, usize),
    /// Inclusive range of clutter copies per image.
    pub bursty: (usize, usize),
    pub clutter_patterns: usize,
    /// Relative noise added to every feature.
    pub noise: f64,
    /// Spatial width of the emitted tensors; rows are padded with zeros.
    pub width: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            images_per_class: 20,
            queries_per_class: 2,
            channels: 32,
            parts_per_class: 4,
            distinctive: (4, 8),
            bursty: (20, 60),
            clutter_patterns: 4,
            noise: 0.05,
            width: 8,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub database: Vec<(String, FeatureTensor)>,
    pub queries: Vec<(String, FeatureTensor)>,
    pub ground_truth: Vec<GroundTruth>,
}

fn sparse_prototype(rng: &mut ChaCha8Rng, k: usize, active: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    for _ in 0..active.max(1) {
        let c = rng.random_range(0..k);
        v[c] += 0.5 + rng.random::<f64>();
    }
    v
}

fn noisy(rng: &mut ChaCha8Rng, proto: &[f64], noise: f64, gain: f64) -> Vec<f64> {
    let scale = proto.iter().cloned().fold(0.0, f64::max);
    let normal = Normal::new(0.0, noise * scale.max(1e-9)).unwrap();
    proto
        .iter()
        .map(|&x| (gain * x + normal.sample(rng).abs() * 0.5).max(0.0))
        .collect()
}

fn to_tensor(
    features: &mut [Vec<f64>],
    width: u32,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> FeatureTensor {
    // Shuffle so clutter is spread over the spatial grid.
    for i in (1..features.len()).rev() {
        let j = rng.random_range(0..=i);
        features.swap(i, j);
    }
    let width = width.max(1) as usize;
    let height = features.len().div_ceil(width);
    let mut values = vec![0.0f32; width * height * k];
    for (l, f) in features.iter().enumerate() {
        for (c, &x) in f.iter().enumerate() {
            values[l * k + c] = x as f32;
        }
    }
    FeatureTensor::new(width as u32, height as u32, k as u32, values)
        .expect("valid synthetic tensor")
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.channels.max(2);
    let parts: Vec<Vec<Vec<f64>>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.parts_per_class.max(1))
                .map(|_| sparse_prototype(&mut rng, k, 3))
                .collect()
        })
        .collect();
    let clutter: Vec<Vec<f64>> = (0..cfg.clutter_patterns.max(1))
        .map(|_| sparse_prototype(&mut rng, k, 5))
        .collect();

    let image = |rng: &mut ChaCha8Rng, class: usize| {
        let mut feats = Vec::new();
        let n_parts =
            rng.random_range(cfg.distinctive.0..=cfg.distinctive.1.max(cfg.distinctive.0));
        let class_parts = &parts[class];
        for _ in 0..n_parts {
            let p = &class_parts[rng.random_range(0..class_parts.len())];
            let gain = 0.7 + 0.6 * rng.random::<f64>();
            feats.push(noisy(rng, p, cfg.noise, gain));
        }
        let n_burst = rng.random_range(cfg.bursty.0..=cfg.bursty.1.max(cfg.bursty.0));
        let pattern = &clutter[rng.random_range(0..clutter.len())];
        for _ in 0..n_burst {
            let gain = 0.9 + 0.2 * rng.random::<f64>();
            feats.push(noisy(rng, pattern, cfg.noise, gain));
        }
        to_tensor(&mut feats, cfg.width, k, rng)
    };

    let mut database = Vec::new();
    let mut queries = Vec::new();
    let mut ground_truth = Vec::new();
    for class in 0..cfg.classes {
        let members: Vec<String> = (0..cfg.images_per_class)
            .map(|i| format!("c{class:03}_{i:04}"))
            .collect();
        for id in &members {
            database.push((id.clone(), image(&mut rng, class)));
        }
        for qi in 0..cfg.queries_per_class {
            let qid = format!("c{class:03}_q{qi}");
            queries.push((qid.clone(), image(&mut rng, class)));
            if !members.is_empty() {
                let gt = GroundTruth::new(qid.clone(), qid, members.iter().cloned(), Vec::new())
                    .expect("non-empty positives");
                ground_truth.push(gt);
            }
        }
    }
    SyntheticDataset {
        database,
        queries,
        ground_truth,
    }
}

impl SyntheticDataset {
    /// Writes `database/*.hft`, `queries/*.hft` and Oxford-style lists in
    /// `gt/`.
    pub fn write_to(&self, root: &Path) -> Result<(), TensorError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source: io::Error| TensorError::IoFailure { path, source }
        };
        for sub in ["database", "queries", "gt"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        for (id, t) in &self.database {
            write_feature_tensor(t, root.join("database").join(format!("{id}.hft")))?;
        }
        for (id, t) in &self.queries {
            write_feature_tensor(t, root.join("queries").join(format!("{id}.hft")))?;
        }
        let gt_dir = root.join("gt");
        for gt in &self.ground_truth {
            let mut good: Vec<&String> = gt.positives.iter().collect();
            good.sort();
            let lists = [
                ("query", format!("{}\n", gt.query_image_id)),
                ("good", good.iter().map(|s| format!("{s}\n")).collect()),
                ("ok", String::new()),
                ("junk", String::new()),
            ];
            for (kind, body) in lists {
                let p = gt_dir.join(format!("{}_{kind}.txt", gt.query_id));
                fs::write(&p, body).map_err(io_err(&p))?;
            }
        }
        Ok(())
    }
}

/// `count` random unit vectors of dimension `dim` scattered around a few
/// cluster centres, flattened row-major as `f32`. Stands in for a large
/// whitened database.
pub fn random_unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centres: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(count * dim);
    let mut row = vec![0.0f64; dim];
    for _ in 0..count {
        let c = &centres[rng.random_range(0..centres.len())];
        for (r, &x) in row.iter_mut().zip(c) {
            *r = x + 1.5 * normal.sample(&mut rng);
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(row.iter().map(|x| (x / n) as f32));
    }
    out
}

/// mAP of one aggregation method on a generated dataset, searching the
/// α-normalized descriptors directly.
pub fn benchmark_map(
    ds: &SyntheticDataset,
    method: Method,
    cfg: &DiffusionConfig,
    alpha: f64,
    opts: &QueryOptions,
    exec: Execution,
) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
    let describe = |items: &[(String, FeatureTensor)]| -> Result<Vec<ImageVector>, Box<dyn std::error::Error + Send + Sync>> {
        let sets = items.iter().map(|(_, t)| flatten(t)).collect::<Result<Vec<_>, _>>()?;
        Ok(aggregate_batch(&sets, method, cfg, alpha, exec)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?)
    };
    let db = describe(&ds.database)?;
    let queries = describe(&ds.queries)?;
    let ids = ds.database.iter().map(|(id, _)| id.clone()).collect();
    let index = build_index(ids, &db)?;
    let mut results = Vec::with_capacity(ds.ground_truth.len());
    for ((qid, _), (q, gt)) in ds.queries.iter().zip(queries.iter().zip(&ds.ground_truth)) {
        debug_assert_eq!(qid, &gt.query_id);
        let mut r = full_query(&index, q, opts, exec)?;
        r.query_id = qid.clone();
        results.push((r, gt.clone()));
    }
    Ok(mean_average_precision(
        &results,
        false,
        ApVariant::Trapezoidal,
    )?)
}
