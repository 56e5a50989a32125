use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use heatrank::aggregation::{aggregate_batch, ImageVector, Method};
use heatrank::diffusion::DiffusionConfig;
use heatrank::evaluation::{evaluate, load_groundtruth, ApVariant};
use heatrank::retrieval::{build_index, full_query, QueryOptions};
use heatrank::tensor_io::{flatten, read_feature_tensor, write_feature_tensor, FeatureTensor};
use heatrank::Execution;
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/five")
}

fn heatrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatrank"))
        .args(args)
        .env_remove("HEATRANK_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = heatrank(args);
    assert!(
        out.status.success(),
        "heatrank {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

/// Aggregates the fixture and builds an unwhitened index.
struct Prepared {
    dir: TempDir,
}

impl Prepared {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let p = Self { dir };
        let fx = fixture();
        ok(&[
            "aggregate",
            "--tensors",
            s(&fx.join("database")),
            "--out",
            s(&p.db()),
        ]);
        ok(&[
            "aggregate",
            "--tensors",
            s(&fx.join("queries")),
            "--out",
            s(&p.queries()),
        ]);
        ok(&["index", "--vectors", s(&p.db()), "--index", s(&p.index())]);
        p
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn db(&self) -> PathBuf {
        self.path("db")
    }
    fn queries(&self) -> PathBuf {
        self.path("q")
    }
    fn index(&self) -> PathBuf {
        self.path("db.hidx")
    }
}

fn map_line(stdout: &str) -> &str {
    stdout
        .lines()
        .find(|l| l.starts_with("mAP over"))
        .expect("mAP line")
}

/// The same pipeline computed in-process.
fn library_map(opts: &QueryOptions) -> f64 {
    let describe = |sub: &str| -> Vec<(String, ImageVector)> {
        let mut paths: Vec<_> = fs::read_dir(fixture().join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        paths.sort();
        let sets: Vec<_> = paths
            .iter()
            .map(|p| flatten(&read_feature_tensor(p).unwrap()).unwrap())
            .collect();
        let vs = aggregate_batch(
            &sets,
            Method::Hew,
            &DiffusionConfig::default(),
            0.5,
            Execution::Sequential,
        );
        paths
            .iter()
            .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
            .zip(vs.into_iter().map(Result::unwrap))
            .collect()
    };
    let db = describe("database");
    let queries = describe("queries");
    let idx = build_index(
        db.iter().map(|d| d.0.clone()).collect(),
        &db.iter().map(|d| d.1.clone()).collect::<Vec<_>>(),
    )
    .unwrap();
    let gts = load_groundtruth(fixture().join("gt")).unwrap();
    let results: Vec<_> = gts
        .iter()
        .map(|gt| {
            let q = &queries.iter().find(|(id, _)| *id == gt.query_id).unwrap().1;
            let mut r = full_query(&idx, q, opts, Execution::Sequential).unwrap();
            r.query_id = gt.query_id.clone();
            (r, gt.clone())
        })
        .collect();
    evaluate(
        &results,
        false,
        ApVariant::Trapezoidal,
        Execution::Sequential,
    )
    .unwrap()
    .map
}

#[test]
fn bundled_fixture_is_the_seeded_synthetic_set() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ds");
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--classes",
        "5",
        "--images-per-class",
        "1",
        "--queries-per-class",
        "1",
    ]);
    for sub in ["database", "queries", "gt"] {
        assert_eq!(
            files(&out.join(sub)),
            files(&fixture().join(sub)),
            "{sub} differs"
        );
    }
}

#[test]
fn eval_prints_map_to_four_decimals() {
    let p = Prepared::new();
    let gt = fixture().join("gt");
    let stdout = ok(&[
        "eval",
        "--gt",
        s(&gt),
        "--queries",
        s(&p.queries()),
        "--index",
        s(&p.index()),
    ]);
    let expected = library_map(&QueryOptions::default());
    assert_eq!(
        map_line(&stdout),
        format!("mAP over 5 queries: {expected:.4}")
    );
    let value = map_line(&stdout).rsplit(' ').next().unwrap();
    assert_eq!(value.split('.').nth(1).unwrap().len(), 4);
}

#[test]
fn eval_with_qe_and_her_runs_the_full_chain() {
    let p = Prepared::new();
    let gt = fixture().join("gt");
    let stdout = ok(&[
        "eval",
        "--gt",
        s(&gt),
        "--queries",
        s(&p.queries()),
        "--index",
        s(&p.index()),
        "--qe",
        "--her",
        "--n-qe",
        "2",
    ]);
    let opts = QueryOptions {
        use_qe: true,
        use_her: true,
        n_qe: 2,
        ..QueryOptions::default()
    };
    assert_eq!(
        map_line(&stdout),
        format!("mAP over 5 queries: {:.4}", library_map(&opts))
    );
}

#[test]
fn query_writes_rankings_over_the_whole_index() {
    let p = Prepared::new();
    let out = p.path("rankings");
    let stdout = ok(&[
        "query",
        "--index",
        s(&p.index()),
        "--queries",
        s(&p.queries()),
        "--qe",
        "--her",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("query ")).count(),
        5
    );
    let written = files(&out);
    assert_eq!(written.len(), 5);
    for (_, body) in written {
        let mut ids: Vec<_> = String::from_utf8(body)
            .unwrap()
            .lines()
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect();
        ids.sort();
        assert_eq!(
            ids,
            [
                "c000_0000",
                "c001_0000",
                "c002_0000",
                "c003_0000",
                "c004_0000"
            ]
        );
    }
}

#[test]
fn k_sweep_at_zero_equals_the_run_without_reranking() {
    let p = Prepared::new();
    let gt = fixture().join("gt");
    let (queries, index) = (p.queries(), p.index());
    let base = [
        "eval",
        "--gt",
        s(&gt),
        "--queries",
        s(&queries),
        "--index",
        s(&index),
    ];
    let plain = ok(&base);
    let plain_map = map_line(&plain).rsplit(' ').next().unwrap().to_string();
    let mut sweep = base.to_vec();
    sweep.extend(["--sweep", "k=0..4 step 2"]);
    let table = ok(&sweep);
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        ["0", "2", "4"]
    );
    assert_eq!(rows[0][1], plain_map);
}

#[test]
fn dimension_sweep_needs_database_vectors_and_a_model() {
    let p = Prepared::new();
    let gt = fixture().join("gt");
    let pca = p.path("m.hpca");
    ok(&["fit-pca", "--train", s(&p.db()), "--pca", s(&pca)]);
    let out = heatrank(&[
        "eval",
        "--gt",
        s(&gt),
        "--queries",
        s(&p.queries()),
        "--index",
        s(&p.index()),
        "--sweep",
        "D=2,4",
    ]);
    assert!(!out.status.success());
    let table = ok(&[
        "eval",
        "--gt",
        s(&gt),
        "--queries",
        s(&p.queries()),
        "--vectors",
        s(&p.db()),
        "--pca",
        s(&pca),
        "--sweep",
        "D=2,4",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].trim_start().starts_with('D'));
}

#[test]
fn commands_are_idempotent() {
    let a = Prepared::new();
    let b = Prepared::new();
    assert_eq!(files(&a.db()), files(&b.db()));
    assert_eq!(fs::read(a.index()).unwrap(), fs::read(b.index()).unwrap());

    let gt = fixture().join("gt");
    let run = |p: &Prepared| {
        let pca = p.path("m.hpca");
        ok(&["fit-pca", "--train", s(&p.db()), "--pca", s(&pca)]);
        let widx = p.path("w.hidx");
        ok(&[
            "index",
            "--vectors",
            s(&p.db()),
            "--pca",
            s(&pca),
            "--dims",
            "4",
            "--index",
            s(&widx),
        ]);
        let report = p.path("report.txt");
        let stdout = ok(&[
            "eval",
            "--gt",
            s(&gt),
            "--queries",
            s(&p.queries()),
            "--index",
            s(&widx),
            "--pca",
            s(&pca),
            "--dims",
            "4",
            "--qe",
            "--her",
            "--report",
            s(&report),
        ]);
        ok(&[
            "query",
            "--index",
            s(&p.index()),
            "--queries",
            s(&p.queries()),
            "--her",
            "--out",
            s(&p.path("r")),
        ]);
        (
            fs::read(pca).unwrap(),
            fs::read(widx).unwrap(),
            fs::read(report).unwrap(),
            stdout,
            files(&p.path("r")),
        )
    };
    assert_eq!(run(&a), run(&b));
    // Re-running over existing outputs changes nothing either.
    assert_eq!(run(&a), run(&b));
}

#[test]
fn aggregate_rejects_an_empty_directory() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = heatrank(&[
        "aggregate",
        "--tensors",
        s(&empty),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no .hft tensors"));
}

#[test]
fn a_single_image_gives_one_vector() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("t");
    fs::create_dir(&src).unwrap();
    fs::copy(
        fixture().join("database/c002_0000.hft"),
        src.join("only.hft"),
    )
    .unwrap();
    let out = tmp.path().join("v");
    ok(&["aggregate", "--tensors", s(&src), "--out", s(&out)]);
    let written = files(&out);
    assert_eq!(written.len(), 1);
    assert_eq!(written[0].0, "only.hvec");
    let v = ImageVector::load(out.join("only.hvec")).unwrap();
    assert!((v.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn suma_equals_hew_when_every_image_has_one_feature() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("t");
    fs::create_dir(&src).unwrap();
    for (i, vals) in [
        [0.5f32, 1.0, 0.0, 2.0],
        [3.0, 0.1, 0.2, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ]
    .iter()
    .enumerate()
    {
        let t = FeatureTensor::new(1, 1, 4, vals.to_vec()).unwrap();
        write_feature_tensor(&t, src.join(format!("img{i}.hft"))).unwrap();
    }
    let hew = tmp.path().join("hew");
    let suma = tmp.path().join("suma");
    ok(&[
        "aggregate",
        "--tensors",
        s(&src),
        "--out",
        s(&hew),
        "--method",
        "hew",
    ]);
    ok(&[
        "aggregate",
        "--tensors",
        s(&src),
        "--out",
        s(&suma),
        "--method",
        "suma",
    ]);
    assert_eq!(files(&hew), files(&suma));
}

#[test]
fn partial_failures_are_listed_and_the_rest_still_written() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("t");
    fs::create_dir(&src).unwrap();
    fs::copy(
        fixture().join("database/c000_0000.hft"),
        src.join("good.hft"),
    )
    .unwrap();
    fs::write(src.join("broken.hft"), b"HFT1 this is not a tensor").unwrap();
    let out_dir = tmp.path().join("v");
    let out = heatrank(&["aggregate", "--tensors", s(&src), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("broken.hft"), "{stderr}");
    assert!(!stderr.contains("good.hft"), "{stderr}");
    assert!(out_dir.join("good.hvec").exists());
    assert!(!out_dir.join("broken.hvec").exists());
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let tmp = TempDir::new().unwrap();
    let nowhere = tmp.path().join("nowhere");
    let (x, gt, queries) = (
        tmp.path().join("x"),
        fixture().join("gt"),
        fixture().join("queries"),
    );
    let cases: [(Vec<&str>, &str); 3] = [
        (
            vec!["index", "--vectors", s(&nowhere), "--index", s(&x)],
            "heatrank aggregate",
        ),
        (
            vec![
                "eval",
                "--gt",
                s(&gt),
                "--queries",
                s(&queries),
                "--index",
                s(&nowhere),
            ],
            "heatrank",
        ),
        (
            vec!["query", "--index", s(&nowhere), "--queries", s(&queries)],
            "heatrank index",
        ),
    ];
    for (args, hint) in cases {
        let out = heatrank(&args);
        assert!(!out.status.success());
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(
            stderr.contains("missing") && stderr.contains(hint),
            "{args:?}: {stderr}"
        );
    }
    // Query vectors missing from the directory point at `aggregate`.
    let p = Prepared::new();
    let out = heatrank(&[
        "eval",
        "--gt",
        s(&fixture().join("gt")),
        "--queries",
        s(&p.db()),
        "--index",
        s(&p.index()),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("heatrank aggregate"));
    let out = heatrank(&[
        "index",
        "--vectors",
        s(&p.db()),
        "--pca",
        s(&nowhere),
        "--index",
        s(&p.path("i")),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("heatrank fit-pca"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.conf");
    let db = fixture().join("database");
    fs::write(
        &cfg,
        format!("# pipeline\nmethod = suma\ntensors = {}\n", db.display()),
    )
    .unwrap();
    let from_file = tmp.path().join("file");
    let from_flag = tmp.path().join("flag");
    let explicit = tmp.path().join("explicit");
    let overridden = tmp.path().join("over");
    ok(&["--config", s(&cfg), "aggregate", "--out", s(&from_file)]);
    ok(&[
        "aggregate",
        "--tensors",
        s(&db),
        "--out",
        s(&from_flag),
        "--method",
        "suma",
    ]);
    ok(&[
        "aggregate",
        "--tensors",
        s(&db),
        "--out",
        s(&explicit),
        "--method",
        "hew",
    ]);
    ok(&[
        "--config",
        s(&cfg),
        "aggregate",
        "--out",
        s(&overridden),
        "--method",
        "hew",
    ]);
    assert_eq!(files(&from_file), files(&from_flag));
    assert_eq!(files(&overridden), files(&explicit));
    assert_ne!(files(&from_file), files(&explicit));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let serial = tmp.path().join("serial");
    let out = Command::new(env!("CARGO_BIN_EXE_heatrank"))
        .args([
            "aggregate",
            "--tensors",
            s(&fixture().join("database")),
            "--out",
            s(&serial),
        ])
        .env("HEATRANK_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let default = tmp.path().join("default");
    ok(&[
        "aggregate",
        "--tensors",
        s(&fixture().join("database")),
        "--out",
        s(&default),
    ]);
    assert_eq!(files(&serial), files(&default));
}

#[test]
fn bench_reports_stages_and_lambda_sensitivity() {
    let stdout = ok(&[
        "bench",
        "--features",
        "40",
        "--channels",
        "8",
        "--db-size",
        "300",
        "--dims",
        "16",
        "--k",
        "30",
        "--reps",
        "1",
        "--lambdas",
        "0.5,2",
    ]);
    for needle in [
        "similarity",
        "temperature",
        "aggregate",
        "|V|=40 K=8",
        "|V|=1 K=8",
        "search",
        "qe",
        "her",
        "lambda sensitivity",
    ] {
        assert!(stdout.contains(needle), "missing `{needle}` in:\n{stdout}");
    }
    let table: Vec<&str> = stdout
        .lines()
        .skip_while(|l| !l.starts_with("lambda sensitivity"))
        .skip(2)
        .collect();
    assert_eq!(table.len(), 2);
    assert!(table[0].trim_start().starts_with("0.5"));
}
