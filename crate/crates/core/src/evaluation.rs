//! Ground truth parsing and average precision under the Oxford protocol.
//!
//! A ground-truth directory holds, per query `q`, the files `q_query.txt`
//! (`name [x1 y1 x2 y2]`), `q_good.txt`, `q_ok.txt` and `q_junk.txt` (one
//! image id per line). Good and ok images are positives; junk images are
//! deleted from a ranking before scoring.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::exec::Execution;
use crate::retrieval::RankedResult;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("malformed query line in {path}: `{line}`")]
    MalformedQueryLine { path: String, line: String },
    #[error("missing list {path}")]
    MissingList { path: String },
    #[error("no query definitions found in {0}")]
    NoQueries(String),
    #[error("query `{0}` has no positives")]
    NoPositives(String),
    #[error("query `{query}`: image `{image}` is both positive and junk")]
    OverlappingLabels { query: String, image: String },
    #[error("ranking for query `{0}` is empty")]
    EmptyRanking(String),
    #[error("nothing to average")]
    Empty,
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub query_id: String,
    pub query_image_id: String,
    pub bbox: Option<[f64; 4]>,
    pub positives: HashSet<String>,
    pub junk: HashSet<String>,
}

impl GroundTruth {
    pub fn new(
        query_id: impl Into<String>,
        query_image_id: impl Into<String>,
        positives: impl IntoIterator<Item = String>,
        junk: impl IntoIterator<Item = String>,
    ) -> Result<Self, EvaluationError> {
        let query_id = query_id.into();
        let positives: HashSet<String> = positives.into_iter().collect();
        let junk: HashSet<String> = junk.into_iter().collect();
        if positives.is_empty() {
            return Err(EvaluationError::NoPositives(query_id));
        }
        if let Some(image) = positives.intersection(&junk).min() {
            return Err(EvaluationError::OverlappingLabels {
                query: query_id,
                image: image.clone(),
            });
        }
        Ok(Self {
            query_id,
            query_image_id: query_image_id.into(),
            bbox: None,
            positives,
            junk,
        })
    }
}

fn read(path: &Path) -> Result<String, EvaluationError> {
    fs::read_to_string(path).map_err(|source| EvaluationError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_list(path: PathBuf) -> Result<Vec<String>, EvaluationError> {
    if !path.is_file() {
        return Err(EvaluationError::MissingList {
            path: path.display().to_string(),
        });
    }
    Ok(read(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn parse_query_line(
    path: &Path,
    text: &str,
) -> Result<(String, Option<[f64; 4]>), EvaluationError> {
    let bad = || EvaluationError::MalformedQueryLine {
        path: path.display().to_string(),
        line: text.trim().to_string(),
    };
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(bad)?;
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(bad)?;
    // Oxford/Paris query files prefix the image name with the collection tag.
    let name = name.strip_prefix("oxc1_").unwrap_or(name).to_string();
    let coords: Vec<f64> = parts
        .map(|p| p.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let bbox = match coords.as_slice() {
        [] => None,
        &[x1, y1, x2, y2] if x1 <= x2 && y1 <= y2 => Some([x1, y1, x2, y2]),
        _ => return Err(bad()),
    };
    Ok((name, bbox))
}

/// Loads every query in `dir`, sorted by query id.
pub fn load_groundtruth(dir: impl AsRef<Path>) -> Result<Vec<GroundTruth>, EvaluationError> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|source| EvaluationError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut queries: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_query.txt"))
                .map(str::to_string)
        })
        .collect();
    queries.sort();
    if queries.is_empty() {
        return Err(EvaluationError::NoQueries(dir.display().to_string()));
    }
    queries
        .into_iter()
        .map(|q| {
            let qpath = dir.join(format!("{q}_query.txt"));
            let (image, bbox) = parse_query_line(&qpath, &read(&qpath)?)?;
            let good = read_list(dir.join(format!("{q}_good.txt")))?;
            let ok = read_list(dir.join(format!("{q}_ok.txt")))?;
            let junk = read_list(dir.join(format!("{q}_junk.txt")))?;
            let mut gt = GroundTruth::new(q, image, good.into_iter().chain(ok), junk)?;
            gt.bbox = bbox;
            Ok(gt)
        })
        .collect()
}

/// Average precision flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApVariant {
    /// Trapezoidal rule over the precision/recall curve, as in the
    /// reference Oxford `compute_ap`.
    #[default]
    Trapezoidal,
    /// Mean of precision at each positive hit.
    AtHits,
}

impl std::str::FromStr for ApVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "trapezoidal" | "trapezoid" => Ok(ApVariant::Trapezoidal),
            "at-hits" | "hits" | "non-interpolated" => Ok(ApVariant::AtHits),
            other => Err(format!("unknown AP variant `{other}`")),
        }
    }
}

/// Positive/negative labels of a ranking after junk (and, optionally, the
/// query image) are deleted.
pub fn filtered_labels<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    gt: &GroundTruth,
    remove_self: bool,
) -> Vec<bool> {
    ids.into_iter()
        .filter(|id| !gt.junk.contains(*id))
        .filter(|id| !(remove_self && *id == gt.query_image_id))
        .map(|id| gt.positives.contains(id))
        .collect()
}

pub fn ap_from_labels(labels: &[bool], total_positives: usize, variant: ApVariant) -> f64 {
    if total_positives == 0 {
        return 0.0;
    }
    let npos = total_positives as f64;
    let mut hits = 0usize;
    match variant {
        ApVariant::Trapezoidal => {
            let (mut ap, mut old_recall, mut old_precision) = (0.0, 0.0, 1.0);
            for (j, &pos) in labels.iter().enumerate() {
                if pos {
                    hits += 1;
                }
                let recall = hits as f64 / npos;
                let precision = hits as f64 / (j + 1) as f64;
                ap += (recall - old_recall) * (old_precision + precision) / 2.0;
                old_recall = recall;
                old_precision = precision;
            }
            ap
        }
        ApVariant::AtHits => {
            let mut sum = 0.0;
            for (j, &pos) in labels.iter().enumerate() {
                if pos {
                    hits += 1;
                    sum += hits as f64 / (j + 1) as f64;
                }
            }
            sum / npos
        }
    }
}

pub fn average_precision(
    ranked: &RankedResult,
    gt: &GroundTruth,
    remove_self: bool,
    variant: ApVariant,
) -> Result<f64, EvaluationError> {
    if gt.positives.is_empty() {
        return Err(EvaluationError::NoPositives(gt.query_id.clone()));
    }
    if ranked.is_empty() {
        return Err(EvaluationError::EmptyRanking(gt.query_id.clone()));
    }
    let labels = filtered_labels(ranked.ids(), gt, remove_self);
    Ok(ap_from_labels(&labels, gt.positives.len(), variant))
}

/// Per-query APs and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub per_query: Vec<(String, f64)>,
    pub map: f64,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (q, ap) in &self.per_query {
            let _ = writeln!(out, "{q}\tAP={ap:.4}");
        }
        let _ = writeln!(
            out,
            "mAP over {} queries: {:.4}",
            self.per_query.len(),
            self.map
        );
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!("queries={}\nmap={:.6}\n", self.per_query.len(), self.map);
        for (q, ap) in &self.per_query {
            let _ = writeln!(out, "ap.{q}={ap:.6}");
        }
        out
    }
}

pub fn evaluate(
    results: &[(RankedResult, GroundTruth)],
    remove_self: bool,
    variant: ApVariant,
    exec: Execution,
) -> Result<Report, EvaluationError> {
    if results.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let aps = exec.map_slice(results, |(r, gt)| {
        average_precision(r, gt, remove_self, variant)
    });
    let per_query = results
        .iter()
        .zip(aps)
        .map(|((_, gt), ap)| ap.map(|ap| (gt.query_id.clone(), ap)))
        .collect::<Result<Vec<_>, _>>()?;
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok(Report { per_query, map })
}

pub fn mean_average_precision(
    results: &[(RankedResult, GroundTruth)],
    remove_self: bool,
    variant: ApVariant,
) -> Result<f64, EvaluationError> {
    evaluate(results, remove_self, variant, Execution::Sequential).map(|r| r.map)
}
