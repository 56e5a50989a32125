//! Linear-scan cosine index, query expansion and heat re-ranking.
//!
//! Index file layout (little-endian): `"HIDX"`, version `u32 = 1`, `D u32`,
//! `count u32`, then per row a `u16` id length, the UTF-8 id, and `D` `f32`
//! values.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::aggregation::{normalize, ImageVector, Stage};
use crate::diffusion::{self, DiffusionConfig, DiffusionError, SimilarityMatrix};
use crate::exec::Execution;
use crate::tensor_io::write_atomic;

pub const MAGIC: &[u8; 4] = b"HIDX";
pub const VERSION: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_K: usize = 800;
pub const DEFAULT_N_QE: usize = 10;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("vector `{id}` has norm {norm}, expected unit norm")]
    NormViolation { id: String, norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{ids} ids for {vectors} vectors")]
    CountMismatch { ids: usize, vectors: usize },
    #[error("id `{0}` is too long to persist")]
    IdTooLong(String),
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("id `{0}` is not in the index")]
    UnknownId(String),
    #[error("n_qe must be at least 1")]
    InvalidExpansion,
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Immutable set of unit-norm descriptors addressed by image id.
#[derive(Debug, Clone)]
pub struct Index {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    rows: HashMap<String, usize>,
}

impl PartialEq for Index {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids && self.dim == other.dim && self.vectors == other.vectors
    }
}

fn check_norm(id: &str, norm: f64) -> Result<(), RetrievalError> {
    if (norm - 1.0).abs() > NORM_TOLERANCE || !norm.is_finite() {
        return Err(RetrievalError::NormViolation {
            id: id.to_string(),
            norm,
        });
    }
    Ok(())
}

pub fn build_index(ids: Vec<String>, vectors: &[ImageVector]) -> Result<Index, RetrievalError> {
    if ids.len() != vectors.len() {
        return Err(RetrievalError::CountMismatch {
            ids: ids.len(),
            vectors: vectors.len(),
        });
    }
    let dim = vectors.first().map(|v| v.dim()).unwrap_or(0);
    let mut flat = Vec::with_capacity(dim * vectors.len());
    for (id, v) in ids.iter().zip(vectors) {
        if v.dim() != dim {
            return Err(RetrievalError::DimMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
        check_norm(id, v.norm())?;
        flat.extend(v.values.iter().map(|&x| x as f32));
    }
    Index::from_parts(ids, dim, flat)
}

impl Index {
    /// Builds an index straight from row-major `f32` storage.
    pub fn from_f32(
        ids: Vec<String>,
        dim: usize,
        vectors: Vec<f32>,
    ) -> Result<Self, RetrievalError> {
        if vectors.len() != ids.len() * dim {
            return Err(RetrievalError::CountMismatch {
                ids: ids.len(),
                vectors: vectors.len().checked_div(dim).unwrap_or(0),
            });
        }
        Self::from_parts(ids, dim, vectors)
    }

    fn from_parts(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self, RetrievalError> {
        let mut rows = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if rows.insert(id.clone(), row).is_some() {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        let norms: Vec<f64> = if dim == 0 {
            vec![0.0; ids.len()]
        } else {
            vectors
                .chunks_exact(dim)
                .map(|r| r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt())
                .collect()
        };
        for (id, &n) in ids.iter().zip(&norms) {
            check_norm(id, n)?;
        }
        Ok(Self {
            ids,
            dim,
            vectors,
            norms,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    /// Stored vector of `id`, widened to `f64`.
    pub fn vector(&self, id: &str) -> Option<ImageVector> {
        self.row_of(id).map(|r| {
            ImageVector::new(
                self.row(r).iter().map(|&x| x as f64).collect(),
                Stage::Whitened,
            )
        })
    }

    fn cosine_scores(&self, q: &[f64], exec: Execution) -> Vec<f64> {
        const CHUNK: usize = 1024;
        let mut scores = vec![0.0f64; self.len()];
        exec.for_each_chunk_mut(&mut scores, CHUNK, |c, out| {
            for (i, s) in out.iter_mut().enumerate() {
                let row = c * CHUNK + i;
                let dot: f64 = self
                    .row(row)
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| a as f64 * b)
                    .sum();
                *s = dot / self.norms[row];
            }
        });
        scores
    }

    /// Rows ordered by descending cosine, ties by ascending id.
    pub fn ranked_rows(
        &self,
        q: &ImageVector,
        exec: Execution,
    ) -> Result<Vec<(usize, f64)>, RetrievalError> {
        if q.dim() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                found: q.dim(),
            });
        }
        let qn = q.norm();
        check_norm("<query>", qn)?;
        let qv: Vec<f64> = q.values.iter().map(|x| x / qn).collect();
        let scores = self.cosine_scores(&qv, exec);
        let mut hits: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        hits.sort_unstable_by(|a, b| self.hit_order(a, b));
        Ok(hits)
    }

    fn hit_order(&self, a: &(usize, f64), b: &(usize, f64)) -> Ordering {
        b.1.total_cmp(&a.1)
            .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
    }

    fn to_result(&self, query_id: &str, hits: &[(usize, f64)]) -> RankedResult {
        RankedResult {
            query_id: query_id.to_string(),
            entries: hits
                .iter()
                .map(|&(r, s)| (self.ids[r].clone(), s))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, RetrievalError> {
        let mut out = Vec::with_capacity(16 + self.vectors.len() * 4 + self.ids.len() * 18);
        out.extend_from_slice(MAGIC);
        for w in [VERSION, self.dim as u32, self.ids.len() as u32] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for (r, id) in self.ids.iter().enumerate() {
            let len = u16::try_from(id.len()).map_err(|_| RetrievalError::IdTooLong(id.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.row(r) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let malformed = |m: String| RetrievalError::Malformed(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(malformed("missing HIDX magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(malformed(format!("unsupported version {}", word(4))));
        }
        let dim = word(8) as usize;
        let count = word(12) as usize;
        let mut at = 16;
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count.saturating_mul(dim).min(bytes.len() / 4));
        for r in 0..count {
            if at + 2 > bytes.len() {
                return Err(malformed(format!(
                    "truncated at row {r} (byte offset {at})"
                )));
            }
            let len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
            at += 2;
            let end = at + len + 4 * dim;
            if end > bytes.len() {
                return Err(malformed(format!(
                    "truncated at row {r} (byte offset {at})"
                )));
            }
            let id = std::str::from_utf8(&bytes[at..at + len])
                .map_err(|_| malformed(format!("id at byte offset {at} is not UTF-8")))?;
            ids.push(id.to_string());
            at += len;
            vectors.extend(
                bytes[at..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
            at = end;
        }
        if at != bytes.len() {
            return Err(malformed(format!("trailing bytes at offset {at}")));
        }
        Self::from_parts(ids, dim, vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes()?).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// An ordered list of `(image id, score)` for one query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedResult {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].1 >= w[1].1)
    }
}

/// Full cosine ranking of the index against `q`.
pub fn search(
    idx: &Index,
    q: &ImageVector,
    exec: Execution,
) -> Result<RankedResult, RetrievalError> {
    let hits = idx.ranked_rows(q, exec)?;
    Ok(idx.to_result("", &hits))
}

/// L2-normalized mean of `q` and its top `n_qe` results.
pub fn expand_query(
    q: &ImageVector,
    ranked: &RankedResult,
    idx: &Index,
    n_qe: usize,
) -> Result<ImageVector, RetrievalError> {
    if ranked.is_empty() {
        return Err(RetrievalError::EmptyRanking);
    }
    if n_qe == 0 {
        return Err(RetrievalError::InvalidExpansion);
    }
    let rows = ranked
        .ids()
        .take(n_qe)
        .map(|id| {
            idx.row_of(id)
                .ok_or_else(|| RetrievalError::UnknownId(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    expand_rows(q, idx, &rows)
}

fn expand_rows(
    q: &ImageVector,
    idx: &Index,
    rows: &[usize],
) -> Result<ImageVector, RetrievalError> {
    if q.dim() != idx.dim() {
        return Err(RetrievalError::DimMismatch {
            expected: idx.dim(),
            found: q.dim(),
        });
    }
    let mut sum = q.values.clone();
    for &r in rows {
        let norm = idx.norms[r];
        for (s, &x) in sum.iter_mut().zip(idx.row(r)) {
            *s += x as f64 / norm;
        }
    }
    let count = (rows.len() + 1) as f64;
    sum.iter_mut().for_each(|s| *s /= count);
    normalize(&mut sum).ok_or(RetrievalError::NormViolation {
        id: "<expanded query>".into(),
        norm: 0.0,
    })?;
    Ok(ImageVector::new(sum, q.stage))
}

/// One short-list entry handed to [`rerank_heat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub score: f64,
    pub vector: Vec<f64>,
}

/// Re-ranking output with the temperature gain of each entry.
fn order_by_gain(ids: Vec<String>, gains: Vec<f64>) -> Vec<(String, f64)> {
    let mut entries: Vec<(String, f64)> = ids.into_iter().zip(gains).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries
}

/// Centered cosine similarities of the query (`Q₁`) and among the
/// candidates (`Q₂`).
pub fn centered_similarities(
    q: &[f64],
    candidates: &[&[f64]],
    clamp_negative: bool,
) -> (Vec<f64>, SimilarityMatrix) {
    let dim = q.len();
    let k = candidates.len();
    let mut mean = q.to_vec();
    for c in candidates {
        for (m, x) in mean.iter_mut().zip(c.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= (k + 1) as f64);
    let mut stacked = Vec::with_capacity((k + 1) * dim);
    stacked.extend(q.iter().zip(&mean).map(|(x, m)| x - m));
    for c in candidates {
        stacked.extend(c.iter().zip(&mean).map(|(x, m)| x - m));
    }
    let all =
        SimilarityMatrix::cosine_lenient(&stacked, dim, clamp_negative, Execution::Sequential);
    let q1: Vec<f64> = all.row(0)[1..].to_vec();
    let mut q2 = Vec::with_capacity(k * k);
    for m in 1..=k {
        q2.extend_from_slice(&all.row(m)[1..]);
    }
    let q2 = SimilarityMatrix::from_dense(k, q2).expect("sub-block of a symmetric matrix");
    (q1, q2)
}

/// Heat re-ranking with the query as the unit source.
///
/// Short lists of length 0 or 1 are returned unchanged.
pub fn rerank_heat(
    q: &ImageVector,
    topk: &[Candidate],
    cfg: &DiffusionConfig,
) -> Result<RankedResult, RetrievalError> {
    if topk.len() <= 1 {
        return Ok(RankedResult {
            query_id: String::new(),
            entries: topk.iter().map(|c| (c.id.clone(), c.score)).collect(),
        });
    }
    if let Some(c) = topk.iter().find(|c| c.vector.len() != q.dim()) {
        return Err(RetrievalError::DimMismatch {
            expected: q.dim(),
            found: c.vector.len(),
        });
    }
    let views: Vec<&[f64]> = topk.iter().map(|c| c.vector.as_slice()).collect();
    let (q1, q2) = centered_similarities(&q.values, &views, cfg.clamp_negative);
    let gains = diffusion::source_gains(&q1, &q2, cfg)?;
    let ids = topk.iter().map(|c| c.id.clone()).collect();
    Ok(RankedResult {
        query_id: String::new(),
        entries: order_by_gain(ids, gains),
    })
}

/// Re-ranking on precomputed similarities (`Q₁`, `Q₂`), for callers that
/// bring their own similarity model.
pub fn rerank_with_similarities(
    ids: &[String],
    q1: &[f64],
    q2: &SimilarityMatrix,
    cfg: &DiffusionConfig,
) -> Result<RankedResult, RetrievalError> {
    if ids.len() != q1.len() {
        return Err(RetrievalError::DimMismatch {
            expected: ids.len(),
            found: q1.len(),
        });
    }
    let gains = diffusion::source_gains(q1, q2, cfg)?;
    Ok(RankedResult {
        query_id: String::new(),
        entries: order_by_gain(ids.to_vec(), gains),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOptions {
    pub use_qe: bool,
    pub use_her: bool,
    /// Short-list size for re-ranking; `0` disables it.
    pub k: usize,
    pub n_qe: usize,
    pub cfg: DiffusionConfig,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            use_qe: false,
            use_her: false,
            k: DEFAULT_K,
            n_qe: DEFAULT_N_QE,
            cfg: DiffusionConfig::default(),
        }
    }
}

/// Search, then optional query expansion and heat re-ranking of the top
/// `k`. Entries past `k` keep their cosine order and scores, so scores are
/// only monotone within the re-ranked prefix and within the tail.
pub fn full_query(
    idx: &Index,
    q: &ImageVector,
    opts: &QueryOptions,
    exec: Execution,
) -> Result<RankedResult, RetrievalError> {
    let mut query = q.clone();
    let mut hits = idx.ranked_rows(&query, exec)?;
    if opts.use_qe {
        if hits.is_empty() {
            return Err(RetrievalError::EmptyRanking);
        }
        if opts.n_qe == 0 {
            return Err(RetrievalError::InvalidExpansion);
        }
        let rows: Vec<usize> = hits.iter().take(opts.n_qe).map(|h| h.0).collect();
        query = expand_rows(&query, idx, &rows)?;
        hits = idx.ranked_rows(&query, exec)?;
    }
    let mut result = idx.to_result("", &hits);
    let k = opts.k.min(hits.len());
    if opts.use_her && k >= 2 {
        let topk: Vec<Candidate> = hits[..k]
            .iter()
            .map(|&(r, s)| Candidate {
                id: idx.ids[r].clone(),
                score: s,
                vector: idx
                    .row(r)
                    .iter()
                    .map(|&x| x as f64 / idx.norms[r])
                    .collect(),
            })
            .collect();
        let reranked = rerank_heat(&query, &topk, &opts.cfg)?;
        result.entries.splice(..k, reranked.entries);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> ImageVector {
        let mut v = v.to_vec();
        normalize(&mut v).unwrap();
        ImageVector::new(v, Stage::Whitened)
    }

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn basis_index() -> Index {
        build_index(
            ids(&["a_e1", "b_e2", "c_mix"]),
            &[unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])],
        )
        .unwrap()
    }

    #[test]
    fn build_rejects_bad_input() {
        let idx = basis_index();
        assert_eq!(idx.len(), 3);
        assert!(matches!(
            build_index(ids(&["x", "x"]), &[unit(&[1.0]), unit(&[1.0])]),
            Err(RetrievalError::DuplicateId(id)) if id == "x"
        ));
        assert!(matches!(
            build_index(ids(&["x"]), &[ImageVector::new(vec![2.0], Stage::Whitened)]),
            Err(RetrievalError::NormViolation { .. })
        ));
        assert!(matches!(
            build_index(ids(&["x", "y"]), &[unit(&[1.0]), unit(&[1.0, 0.0])]),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn index_file_round_trips() {
        let idx = basis_index();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.hidx");
        idx.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * (2 + 8) + "a_e1b_e2c_mix".len());
        assert_eq!(Index::load(&path).unwrap(), idx);
        assert!(Index::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn search_examples() {
        let idx = basis_index();
        let r = search(&idx, &unit(&[1.0, 0.0]), Execution::Sequential).unwrap();
        let order: Vec<&str> = r.ids().collect();
        assert_eq!(order, ["a_e1", "c_mix", "b_e2"]);
        let scores: Vec<f64> = r.entries.iter().map(|e| e.1).collect();
        assert!((scores[0] - 1.0).abs() < 1e-9);
        assert!((scores[1] - 0.5f64.sqrt()).abs() < 1e-7);
        assert!(scores[2].abs() < 1e-9);
        assert!(r.is_sorted());

        assert!(matches!(
            search(&idx, &unit(&[1.0, 0.0, 0.0]), Execution::Sequential),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn exact_match_scores_one() {
        let v = unit(&[0.3, 0.1, 0.7, 0.2]);
        let idx = build_index(ids(&["p", "q"]), &[v.clone(), unit(&[1.0, 0.0, 0.0, 0.0])]).unwrap();
        let stored = idx.vector("p").unwrap();
        let r = search(&idx, &unit(&stored.values), Execution::Sequential).unwrap();
        assert_eq!(r.entries[0].0, "p");
        assert!((r.entries[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ties_break_by_id() {
        let v = unit(&[1.0, 2.0]);
        let idx = build_index(
            ids(&["zeta", "other", "alpha"]),
            &[v.clone(), unit(&[2.0, -1.0]), v.clone()],
        )
        .unwrap();
        let r = search(&idx, &v, Execution::Parallel).unwrap();
        let order: Vec<&str> = r.ids().collect();
        assert_eq!(order, ["alpha", "zeta", "other"]);
    }

    #[test]
    fn expansion_examples() {
        let idx = build_index(ids(&["e2", "e1"]), &[unit(&[0.0, 1.0]), unit(&[1.0, 0.0])]).unwrap();
        let q = unit(&[1.0, 0.0]);
        let ranked = RankedResult {
            query_id: String::new(),
            entries: vec![("e2".into(), 0.0)],
        };
        let e = expand_query(&q, &ranked, &idx, 1).unwrap();
        let h = 0.5f64.sqrt();
        assert!((e.values[0] - h).abs() < 1e-12 && (e.values[1] - h).abs() < 1e-12);

        let consensus = build_index(ids(&["x", "y"]), &[q.clone(), q.clone()]).unwrap();
        let r = search(&consensus, &q, Execution::Sequential).unwrap();
        let e = expand_query(&q, &r, &consensus, DEFAULT_N_QE).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12 && e.values[1].abs() < 1e-12);

        assert!(matches!(
            expand_query(&q, &RankedResult::default(), &idx, 10),
            Err(RetrievalError::EmptyRanking)
        ));
    }

    fn cand(id: &str, v: &[f64]) -> Candidate {
        Candidate {
            id: id.into(),
            score: 0.0,
            vector: unit(v).values,
        }
    }

    #[test]
    fn short_lists_pass_through() {
        let q = unit(&[1.0, 0.0]);
        let cfg = DiffusionConfig::default();
        assert!(rerank_heat(&q, &[], &cfg).unwrap().is_empty());
        let one = [Candidate {
            id: "only".into(),
            score: 0.7,
            vector: vec![0.0, 1.0],
        }];
        let r = rerank_heat(&q, &one, &cfg).unwrap();
        assert_eq!(r.entries, vec![("only".to_string(), 0.7)]);
    }

    #[test]
    fn rerank_hand_examples() {
        let cfg = DiffusionConfig::default();
        let none = SimilarityMatrix::from_dense(2, vec![0.0; 4]).unwrap();
        let r = rerank_with_similarities(&ids(&["a", "b"]), &[0.6, 0.5], &none, &cfg).unwrap();
        assert_eq!(r.entries[0].0, "a");
        assert!((r.entries[0].1 - 0.375).abs() < 1e-12);
        assert!((r.entries[1].1 - 1.0 / 3.0).abs() < 1e-12);

        let pair = SimilarityMatrix::from_dense(2, vec![0.0, 0.9, 0.9, 0.0]).unwrap();
        let r = rerank_with_similarities(&ids(&["b", "a"]), &[0.5, 0.5], &pair, &cfg).unwrap();
        let order: Vec<&str> = r.ids().collect();
        assert_eq!(order, ["a", "b"]);
        assert!((r.entries[0].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rerank_is_a_permutation_with_bounded_gains() {
        let q = unit(&[1.0, 0.2, 0.1]);
        let top = vec![
            cand("a", &[1.0, 0.1, 0.0]),
            cand("b", &[0.9, 0.3, 0.2]),
            cand("c", &[0.1, 1.0, 0.3]),
            cand("d", &[0.2, 0.1, 1.0]),
            cand("e", &[1.0, 0.2, 0.1]),
        ];
        let r = rerank_heat(&q, &top, &DiffusionConfig::default()).unwrap();
        let mut got: Vec<&str> = r.ids().collect();
        got.sort();
        assert_eq!(got, ["a", "b", "c", "d", "e"]);
        assert!(r.entries.iter().all(|e| (0.0..=1.0).contains(&e.1)));
        assert!(r.is_sorted());
        // the duplicate of the query gains the most heat
        assert_eq!(r.entries[0].0, "e");
    }

    #[test]
    fn vector_at_the_mean_is_isolated() {
        // Three collinear points: the middle one centers to zero.
        let q = ImageVector::new(vec![1.0, 0.0], Stage::Whitened);
        let top = vec![
            Candidate {
                id: "mid".into(),
                score: 0.0,
                vector: unit(&[1.0, 1.0]).values,
            },
            Candidate {
                id: "far".into(),
                score: 0.0,
                vector: vec![2f64.sqrt() - 1.0, 2f64.sqrt()],
            },
        ];
        let r = rerank_heat(&q, &top, &DiffusionConfig::default()).unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn full_query_modes() {
        let vecs: Vec<ImageVector> = (0..30)
            .map(|i| {
                let t = i as f64 * 0.21;
                unit(&[t.cos(), t.sin(), 0.3 + (i % 3) as f64 * 0.1])
            })
            .collect();
        let names: Vec<String> = (0..30).map(|i| format!("img{i:02}")).collect();
        let idx = build_index(names, &vecs).unwrap();
        let q = unit(&[1.0, 0.1, 0.3]);

        let plain = full_query(&idx, &q, &QueryOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(plain, search(&idx, &q, Execution::Sequential).unwrap());

        let her = QueryOptions {
            use_qe: true,
            use_her: true,
            k: 10_000,
            ..QueryOptions::default()
        };
        let r = full_query(&idx, &q, &her, Execution::Parallel).unwrap();
        assert_eq!(r.len(), 30);

        let k8 = QueryOptions {
            use_her: true,
            k: 8,
            ..QueryOptions::default()
        };
        let r = full_query(&idx, &q, &k8, Execution::Sequential).unwrap();
        let base = search(&idx, &q, Execution::Sequential).unwrap();
        let mut head: Vec<&str> = r.ids().take(8).collect();
        let mut base_head: Vec<&str> = base.ids().take(8).collect();
        assert_eq!(r.entries[8..], base.entries[8..]);
        head.sort();
        base_head.sort();
        assert_eq!(head, base_head);

        let k0 = QueryOptions {
            use_her: true,
            k: 0,
            ..QueryOptions::default()
        };
        assert_eq!(
            full_query(&idx, &q, &k0, Execution::Sequential).unwrap(),
            base
        );
    }
}
