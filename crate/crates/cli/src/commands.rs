use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use heatrank::aggregation::{aggregate_batch, ImageVector, Method, DEFAULT_ALPHA};
use heatrank::diffusion::DiffusionConfig;
use heatrank::evaluation::{evaluate, load_groundtruth, ApVariant, GroundTruth, Report};
use heatrank::retrieval::{
    build_index, full_query, Index, QueryOptions, RankedResult, DEFAULT_K, DEFAULT_N_QE,
};
use heatrank::synthetic::{generate, SyntheticConfig};
use heatrank::tensor_io::{flatten, read_feature_tensor, write_atomic};
use heatrank::whitening::{fit_pca, PcaModel};
use heatrank::Execution;

use crate::config::{ConfigFile, Sweep};
use crate::{Command, Params};

pub const DEFAULT_DIMS: usize = 512;

/// Resolved pipeline parameters.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: DiffusionConfig,
    pub alpha: f64,
    pub k: usize,
    pub n_qe: usize,
    /// `None` means "as many as the model allows, up to 512".
    pub dims: Option<usize>,
    pub ap_variant: ApVariant,
    pub method: Method,
}

impl Pipeline {
    pub fn resolve(p: &Params, file: &ConfigFile) -> Result<Self> {
        let mut cfg = DiffusionConfig::with_lambda(file.get_or("lambda", p.lambda, 1.0)?);
        cfg.clamp_negative = file.get_or("clamp", p.clamp, true)?;
        cfg.validate()?;
        let parse_str = |key: &str, flag: &Option<String>| {
            flag.clone().or_else(|| file.raw(key).map(str::to_string))
        };
        let ap_variant = match parse_str("ap_variant", &p.ap_variant) {
            Some(v) => v.parse().map_err(anyhow::Error::msg)?,
            None => ApVariant::default(),
        };
        let method = match parse_str("method", &p.method) {
            Some(v) => v.parse().map_err(anyhow::Error::msg)?,
            None => Method::Hew,
        };
        Ok(Self {
            cfg,
            alpha: file.get_or("alpha", p.alpha, DEFAULT_ALPHA)?,
            k: file.get_or("k", p.k, DEFAULT_K)?,
            n_qe: file.get_or("n_qe", p.n_qe, DEFAULT_N_QE)?,
            dims: file.get("dims", p.dims)?,
            ap_variant,
            method,
        })
    }

    pub fn dims_for(&self, model: &PcaModel) -> usize {
        self.dims
            .unwrap_or_else(|| DEFAULT_DIMS.min(model.source_dim()))
    }

    pub fn query_options(&self, use_qe: bool, use_her: bool) -> QueryOptions {
        QueryOptions {
            use_qe,
            use_her,
            k: self.k,
            n_qe: self.n_qe,
            cfg: self.cfg,
        }
    }
}

pub fn dispatch(command: Command, file: &ConfigFile, seed: u64) -> Result<()> {
    let exec = Execution::Parallel;
    match command {
        Command::Synth {
            out,
            classes,
            images_per_class,
            queries_per_class,
            channels,
        } => {
            let cfg = SyntheticConfig {
                classes,
                images_per_class,
                queries_per_class,
                channels,
                seed,
                ..SyntheticConfig::default()
            };
            let ds = generate(&cfg);
            ds.write_to(&out)?;
            println!(
                "wrote {} database tensors, {} queries and ground truth to {}",
                ds.database.len(),
                ds.queries.len(),
                out.display()
            );
            Ok(())
        }
        Command::Aggregate {
            tensors,
            out,
            params,
        } => {
            let tensors = required(file.path("tensors", tensors), "tensors", "--tensors DIR")?;
            let out = required(file.path("out", out), "out", "--out DIR")?;
            let pipe = Pipeline::resolve(&params, file)?;
            cmd_aggregate(&tensors, &out, &pipe, exec)
        }
        Command::FitPca { train, pca } => {
            let train = required(file.path("train", train), "train", "--train DIR")?;
            let pca = required(file.path("pca", pca), "pca", "--pca FILE")?;
            cmd_fit_pca(&train, &pca)
        }
        Command::Index {
            vectors,
            pca,
            index,
            params,
        } => {
            let vectors = required(file.path("vectors", vectors), "vectors", "--vectors DIR")?;
            let index = required(file.path("index", index), "index", "--index FILE")?;
            let pipe = Pipeline::resolve(&params, file)?;
            let model = load_model(file.path("pca", pca).as_deref())?;
            let idx = index_from_vectors(&vectors, model.as_ref(), &pipe)?;
            idx.save(&index)?;
            println!(
                "indexed {} vectors of dimension {} into {}",
                idx.len(),
                idx.dim(),
                index.display()
            );
            Ok(())
        }
        Command::Query {
            index,
            queries,
            pca,
            out,
            top,
            qe,
            her,
            params,
        } => {
            let index = required(file.path("index", index), "index", "--index FILE")?;
            let queries = required(file.path("queries", queries), "queries", "--queries PATH")?;
            let pipe = Pipeline::resolve(&params, file)?;
            let model = load_model(file.path("pca", pca).as_deref())?;
            let opts = pipe.query_options(file.switch("qe", qe)?, file.switch("her", her)?);
            cmd_query(
                &index,
                &queries,
                model.as_ref(),
                out.as_deref(),
                top,
                &pipe,
                &opts,
                exec,
            )
        }
        Command::Eval {
            gt,
            queries,
            index,
            vectors,
            pca,
            report,
            qe,
            her,
            remove_self,
            sweep,
            params,
        } => {
            let args = EvalArgs {
                gt: required(file.path("gt", gt), "gt", "--gt DIR")?,
                queries: required(file.path("queries", queries), "queries", "--queries DIR")?,
                index: file.path("index", index),
                vectors: file.path("vectors", vectors),
                pca: file.path("pca", pca),
                report: file.path("report", report),
                use_qe: file.switch("qe", qe)?,
                use_her: file.switch("her", her)?,
                remove_self: file.switch("remove_self", remove_self)?,
                sweep: match sweep {
                    Some(s) => Some(s),
                    None => file
                        .raw("sweep")
                        .map(str::parse)
                        .transpose()
                        .map_err(anyhow::Error::msg)?,
                },
            };
            let pipe = Pipeline::resolve(&params, file)?;
            cmd_eval(&args, &pipe, exec)
        }
        Command::Bench(args) => crate::bench::run(&args, file, seed),
    }
}

fn required(value: Option<PathBuf>, key: &str, flag: &str) -> Result<PathBuf> {
    value.with_context(|| format!("missing `{flag}` (or `{key} = ...` in the config file)"))
}

/// Names the command that creates a missing input.
fn require_artifact(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing {what} `{}`; create it with `heatrank {producer}`",
            path.display()
        );
    }
    Ok(())
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?
    {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn cmd_aggregate(tensors: &Path, out: &Path, pipe: &Pipeline, exec: Execution) -> Result<()> {
    require_artifact(
        tensors,
        "tensor directory",
        "synth, or an external feature extractor",
    )?;
    let files = list_files(tensors, "hft")?;
    ensure!(
        !files.is_empty(),
        "no .hft tensors found in {}",
        tensors.display()
    );
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    // Load and aggregate one image per task; the solve inside stays sequential.
    let results = exec.map_slice(&files, |path| -> Result<()> {
        let tensor = read_feature_tensor(path)?;
        let fs = flatten(&tensor)?;
        let v = aggregate_batch(
            std::slice::from_ref(&fs),
            pipe.method,
            &pipe.cfg,
            pipe.alpha,
            Execution::Sequential,
        )
        .pop()
        .expect("one result per input")?;
        v.save(out.join(format!("{}.hvec", stem(path))))?;
        Ok(())
    });

    let mut failed = Vec::new();
    for (path, r) in files.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("failed: {}: {e:#}", path.display());
            failed.push(path.display().to_string());
        }
    }
    println!(
        "aggregated {} of {} tensors into {}",
        files.len() - failed.len(),
        files.len(),
        out.display()
    );
    if !failed.is_empty() {
        bail!("{} file(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

fn load_vectors(dir: &Path) -> Result<Vec<(String, ImageVector)>> {
    require_artifact(dir, "vector directory", "aggregate")?;
    let files = list_files(dir, "hvec")?;
    ensure!(
        !files.is_empty(),
        "no .hvec vectors found in {}; create them with `heatrank aggregate`",
        dir.display()
    );
    files
        .iter()
        .map(|p| {
            Ok((
                stem(p),
                ImageVector::load(p).with_context(|| format!("loading {}", p.display()))?,
            ))
        })
        .collect()
}

pub fn cmd_fit_pca(train: &Path, pca: &Path) -> Result<()> {
    let vectors: Vec<ImageVector> = load_vectors(train)?.into_iter().map(|(_, v)| v).collect();
    let label = train
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let model = fit_pca(&vectors)?.with_label(label);
    model.save(pca)?;
    println!(
        "fitted whitening on {} vectors of dimension {} into {}",
        vectors.len(),
        model.source_dim(),
        pca.display()
    );
    Ok(())
}

fn load_model(path: Option<&Path>) -> Result<Option<PcaModel>> {
    let Some(path) = path else { return Ok(None) };
    require_artifact(path, "whitening model", "fit-pca")?;
    Ok(Some(PcaModel::load(path)?))
}

fn whiten(v: &ImageVector, model: Option<&PcaModel>, dims: Option<usize>) -> Result<ImageVector> {
    Ok(match (model, dims) {
        (Some(m), Some(d)) => m.transform(v, d)?,
        _ => v.clone(),
    })
}

fn index_at(
    db: &[(String, ImageVector)],
    model: Option<&PcaModel>,
    dims: Option<usize>,
) -> Result<Index> {
    let vectors = db
        .iter()
        .map(|(_, v)| whiten(v, model, dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_index(
        db.iter().map(|(id, _)| id.clone()).collect(),
        &vectors,
    )?)
}

fn index_from_vectors(dir: &Path, model: Option<&PcaModel>, pipe: &Pipeline) -> Result<Index> {
    let db = load_vectors(dir)?;
    index_at(&db, model, model.map(|m| pipe.dims_for(m)))
}

fn load_index(path: &Path) -> Result<Index> {
    require_artifact(path, "index", "index")?;
    Ok(Index::load(path)?)
}

fn ranking_text(r: &RankedResult) -> String {
    let mut s = String::new();
    for (id, score) in &r.entries {
        let _ = writeln!(s, "{id}\t{score:e}");
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_query(
    index: &Path,
    queries: &Path,
    model: Option<&PcaModel>,
    out: Option<&Path>,
    top: usize,
    pipe: &Pipeline,
    opts: &QueryOptions,
    exec: Execution,
) -> Result<()> {
    let idx = load_index(index)?;
    let items = if queries.is_file() {
        vec![(stem(queries), ImageVector::load(queries)?)]
    } else {
        load_vectors(queries)?
    };
    let dims = model.map(|m| pipe.dims_for(m));
    if let Some(out) = out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    let results = exec.map_slice(&items, |(id, v)| -> Result<RankedResult> {
        let q = whiten(v, model, dims)?;
        let mut r = full_query(&idx, &q, opts, Execution::Sequential)?;
        r.query_id = id.clone();
        Ok(r)
    });
    for r in results {
        let r = r?;
        println!("query {}", r.query_id);
        for (rank, (id, score)) in r.entries.iter().take(top).enumerate() {
            println!("{:>5}  {id}  {score:.6}", rank + 1);
        }
        if let Some(out) = out {
            write_atomic(
                &out.join(format!("{}.txt", r.query_id)),
                ranking_text(&r).as_bytes(),
            )?;
        }
    }
    Ok(())
}

pub struct EvalArgs {
    pub gt: PathBuf,
    pub queries: PathBuf,
    pub index: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub pca: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub use_qe: bool,
    pub use_her: bool,
    pub remove_self: bool,
    pub sweep: Option<Sweep>,
}

/// Query vectors in ground-truth order, looked up by query id and then by
/// query image id.
fn load_query_vectors(dir: &Path, gts: &[GroundTruth]) -> Result<Vec<ImageVector>> {
    require_artifact(dir, "query vector directory", "aggregate")?;
    gts.iter()
        .map(|gt| {
            let by_query = dir.join(format!("{}.hvec", gt.query_id));
            let by_image = dir.join(format!("{}.hvec", gt.query_image_id));
            let path = if by_query.exists() {
                by_query
            } else {
                by_image
            };
            require_artifact(
                &path,
                &format!("query vector for `{}`", gt.query_id),
                "aggregate",
            )?;
            Ok(ImageVector::load(&path)?)
        })
        .collect()
}

fn run_queries(
    idx: &Index,
    queries: &[ImageVector],
    gts: &[GroundTruth],
    opts: &QueryOptions,
    remove_self: bool,
    variant: ApVariant,
    exec: Execution,
) -> Result<Report> {
    let ranked = exec.map_slice(queries, |q| full_query(idx, q, opts, Execution::Sequential));
    let mut results = Vec::with_capacity(gts.len());
    for (r, gt) in ranked.into_iter().zip(gts) {
        let mut r = r?;
        r.query_id = gt.query_id.clone();
        results.push((r, gt.clone()));
    }
    Ok(evaluate(&results, remove_self, variant, exec)?)
}

pub fn cmd_eval(args: &EvalArgs, pipe: &Pipeline, exec: Execution) -> Result<()> {
    require_artifact(&args.gt, "ground-truth directory", "synth")?;
    let gts = load_groundtruth(&args.gt)?;
    let raw_queries = load_query_vectors(&args.queries, &gts)?;
    let model = load_model(args.pca.as_deref())?;

    let database = match (&args.index, &args.vectors) {
        (Some(_), Some(_)) => bail!("give either --index or --vectors, not both"),
        (None, None) => {
            bail!("missing database: give --index FILE (from `heatrank index`) or --vectors DIR")
        }
        (Some(path), None) => Database::Built(load_index(path)?),
        (None, Some(dir)) => Database::Raw(load_vectors(dir)?),
    };
    let at_dims = |dims: Option<usize>| -> Result<(Index, Vec<ImageVector>)> {
        let queries = raw_queries
            .iter()
            .map(|q| whiten(q, model.as_ref(), dims))
            .collect::<Result<Vec<_>>>()?;
        let idx = match &database {
            Database::Built(idx) => idx.clone(),
            Database::Raw(db) => index_at(db, model.as_ref(), dims)?,
        };
        Ok((idx, queries))
    };
    let default_dims = model.as_ref().map(|m| pipe.dims_for(m));
    let score = |idx: &Index, queries: &[ImageVector], opts: &QueryOptions| {
        run_queries(
            idx,
            queries,
            &gts,
            opts,
            args.remove_self,
            pipe.ap_variant,
            exec,
        )
    };

    let mut summary = String::new();
    match &args.sweep {
        None => {
            let (idx, queries) = at_dims(default_dims)?;
            let report = score(
                &idx,
                &queries,
                &pipe.query_options(args.use_qe, args.use_her),
            )?;
            print!("{}", report.to_text());
            summary.push_str(&report.to_key_values());
        }
        Some(Sweep::K(ks)) => {
            let (idx, queries) = at_dims(default_dims)?;
            println!("{:>6}  mAP", "k");
            for &k in ks {
                let mut opts = pipe.query_options(args.use_qe, true);
                opts.k = k;
                let report = score(&idx, &queries, &opts)?;
                println!("{k:>6}  {:.4}", report.map);
                let _ = writeln!(summary, "sweep.k.{k}={:.6}", report.map);
            }
        }
        Some(Sweep::Dims(ds)) => {
            ensure!(
                matches!(database, Database::Raw(_)) && model.is_some(),
                "a D sweep re-whitens the database: give --vectors DIR and --pca FILE"
            );
            println!("{:>6}  mAP", "D");
            for &d in ds {
                let (idx, queries) = at_dims(Some(d))?;
                let report = score(
                    &idx,
                    &queries,
                    &pipe.query_options(args.use_qe, args.use_her),
                )?;
                println!("{d:>6}  {:.4}", report.map);
                let _ = writeln!(summary, "sweep.D.{d}={:.6}", report.map);
            }
        }
    }
    if let Some(path) = &args.report {
        write_atomic(path, summary.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

enum Database {
    Built(Index),
    Raw(Vec<(String, ImageVector)>),
}
