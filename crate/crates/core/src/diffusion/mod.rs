//! Steady-state heat diffusion over a feature graph.
//!
//! Each feature in turn is the unit heat source; every node leaks heat to
//! an environment node held at zero with diffusivity `λ`, and edges conduct
//! with their cosine similarity. The *system temperature* `ψ_l` is the sum
//! of node temperatures when feature `l` is the source. Bursty features sit
//! in dense similarity clusters and heat the system up; distinctive ones do
//! not.
//!
//! Two routes compute `ψ`:
//!
//! * [`temperatures_naive`] solves one `(n-1)`-sized system per source,
//!   `O(n⁴)` in total. It exists as a reference.
//! * [`temperatures_fast`] factors one `n × n` matrix. With
//!   `M = I − Λ⁻¹P` we have `ψ_l = Σ_m M⁻¹(m,l) / M⁻¹(l,l)`, and since
//!   `M⁻¹ = (Λ − P)⁻¹Λ` with `Λ − P` symmetric positive definite, this is
//!   `ψ_l = ((Λ − P)⁻¹·1)_l / (Λ − P)⁻¹(l,l)`: one Cholesky factorization,
//!   one solve and the inverse diagonal.

pub mod linalg;

use thiserror::Error;

use crate::exec::Execution;
use crate::tensor_io::FeatureSet;
use linalg::dot;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("feature {index} has zero norm")]
    ZeroNormFeature { index: usize },
    #[error("linear system is singular or ill-conditioned (residual {residual:e})")]
    SingularSystem { residual: f64 },
    #[error("invalid diffusion config: {0}")]
    InvalidConfig(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
}

/// Parameters of the dissipative heat system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig {
    /// Per-node diffusivity towards the environment node.
    pub lambda: f64,
    /// Clamp negative similarities to zero.
    pub clamp_negative: bool,
    /// Upper bound on the relative residual of every linear solve.
    pub solve_tolerance: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            clamp_negative: true,
            solve_tolerance: 1e-8,
        }
    }
}

impl DiffusionConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(DiffusionError::InvalidConfig(
                "lambda must be positive and finite",
            ));
        }
        if !(self.solve_tolerance > 0.0) {
            return Err(DiffusionError::InvalidConfig(
                "solve_tolerance must be positive",
            ));
        }
        Ok(())
    }
}

/// Symmetric, zero-diagonal matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps a row-major `n × n` matrix, zeroing the diagonal and checking
    /// symmetry.
    pub fn from_dense(n: usize, mut entries: Vec<f64>) -> Result<Self, DiffusionError> {
        if entries.len() != n * n {
            return Err(DiffusionError::DimMismatch {
                expected: n * n,
                found: entries.len(),
            });
        }
        for i in 0..n {
            entries[i * n + i] = 0.0;
            for j in 0..i {
                if (entries[i * n + j] - entries[j * n + i]).abs() > 1e-12 {
                    return Err(DiffusionError::InvalidConfig(
                        "similarity matrix is not symmetric",
                    ));
                }
            }
        }
        Ok(Self { n, entries })
    }

    /// Cosine similarities between the rows of a row-major `count × dim`
    /// matrix. Rows of zero norm are an error.
    pub fn cosine(
        rows: &[f64],
        dim: usize,
        clamp_negative: bool,
        exec: Execution,
    ) -> Result<Self, DiffusionError> {
        Self::cosine_impl(rows, dim, clamp_negative, false, exec)
    }

    /// Like [`SimilarityMatrix::cosine`], but zero-norm rows get similarity
    /// zero to everything.
    pub fn cosine_lenient(rows: &[f64], dim: usize, clamp_negative: bool, exec: Execution) -> Self {
        Self::cosine_impl(rows, dim, clamp_negative, true, exec)
            .expect("lenient cosine cannot fail")
    }

    fn cosine_impl(
        rows: &[f64],
        dim: usize,
        clamp_negative: bool,
        lenient: bool,
        exec: Execution,
    ) -> Result<Self, DiffusionError> {
        assert!(dim > 0 && rows.len().is_multiple_of(dim));
        let n = rows.len() / dim;
        let mut unit = rows.to_vec();
        for (index, r) in unit.chunks_exact_mut(dim).enumerate() {
            let norm = dot(r, r).sqrt();
            if norm > 0.0 && norm.is_finite() {
                r.iter_mut().for_each(|x| *x /= norm);
            } else if lenient {
                r.iter_mut().for_each(|x| *x = 0.0);
            } else {
                return Err(DiffusionError::ZeroNormFeature { index });
            }
        }

        const TILE: usize = 8;
        let mut entries = vec![0.0f64; n * n];
        exec.for_each_chunk_mut(&mut entries, TILE * n, |t, tile| {
            let first = t * TILE;
            let rows_here = tile.len() / n;
            for j in first + 1..n {
                let uj = &unit[j * dim..(j + 1) * dim];
                for r in 0..rows_here {
                    let i = first + r;
                    if j > i {
                        let mut c = dot(&unit[i * dim..(i + 1) * dim], uj);
                        c = c.min(1.0);
                        if clamp_negative {
                            c = c.max(0.0);
                        } else {
                            c = c.max(-1.0);
                        }
                        tile[r * n + j] = c;
                    }
                }
            }
        });
        for i in 0..n {
            for j in 0..i {
                entries[i * n + j] = entries[j * n + i];
            }
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.n + k]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.entries[m * self.n..(m + 1) * self.n]
    }

    pub fn as_dense(&self) -> &[f64] {
        &self.entries
    }

    /// `a_m = Σ_k P(m,k) + λ`.
    pub fn dissipation_diagonal(&self, lambda: f64) -> Vec<f64> {
        (0..self.n)
            .map(|m| self.row(m).iter().sum::<f64>() + lambda)
            .collect()
    }
}

/// Cosine similarity matrix of a feature set.
pub fn similarity_matrix(
    fs: &FeatureSet,
    exec: Execution,
) -> Result<SimilarityMatrix, DiffusionError> {
    SimilarityMatrix::cosine(fs.as_flat(), fs.dim(), true, exec)
}

/// Per-source system temperatures `ψ_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperatures {
    pub psi: Vec<f64>,
}

impl Temperatures {
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
}

/// Gaussian elimination with partial pivoting on a row-major system.
fn solve_general(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))?;
        if a[p * n + c] == 0.0 {
            return None;
        }
        if p != c {
            for k in 0..n {
                a.swap(c * n + k, p * n + k);
            }
            b.swap(c, p);
        }
        let d = a[c * n + c];
        for r in c + 1..n {
            let f = a[r * n + c] / d;
            if f != 0.0 {
                for k in c..n {
                    a[r * n + k] -= f * a[c * n + k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / a[i * n + i];
    }
    Some(b)
}

fn relative_residual(a: &[f64], x: &[f64], b: &[f64]) -> f64 {
    let n = b.len();
    let scale = b
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    (0..n)
        .map(|i| (dot(&a[i * n..(i + 1) * n], x) - b[i]).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Reference route: one reduced system per heat source.
///
/// For source `l`, `μ = (I − Λ_l⁻¹P₂)⁻¹ Λ_l⁻¹P₁` over the other nodes, and
/// `ψ_l = 1 + Σ μ`.
pub fn temperatures_naive(
    p: &SimilarityMatrix,
    cfg: &DiffusionConfig,
) -> Result<Temperatures, DiffusionError> {
    cfg.validate()?;
    let n = p.n();
    let a = p.dissipation_diagonal(cfg.lambda);
    let mut psi = Vec::with_capacity(n);
    for l in 0..n {
        let others: Vec<usize> = (0..n).filter(|&m| m != l).collect();
        let r = others.len();
        let mut system = vec![0.0; r * r];
        let mut rhs = vec![0.0; r];
        for (ri, &m) in others.iter().enumerate() {
            for (ci, &k) in others.iter().enumerate() {
                let delta = if ri == ci { 1.0 } else { 0.0 };
                system[ri * r + ci] = delta - p.get(m, k) / a[m];
            }
            rhs[ri] = p.get(m, l) / a[m];
        }
        let mu =
            solve_general(system.clone(), rhs.clone()).ok_or(DiffusionError::SingularSystem {
                residual: f64::INFINITY,
            })?;
        let residual = relative_residual(&system, &mu, &rhs);
        if !(residual <= cfg.solve_tolerance) && rhs.iter().any(|&v| v != 0.0) {
            return Err(DiffusionError::SingularSystem { residual });
        }
        psi.push(1.0 + mu.iter().sum::<f64>());
    }
    Ok(Temperatures { psi })
}

/// Fast route: a single factorization of `Λ − P`.
pub fn temperatures_fast(
    p: &SimilarityMatrix,
    cfg: &DiffusionConfig,
    exec: Execution,
) -> Result<Temperatures, DiffusionError> {
    cfg.validate()?;
    let n = p.n();
    if n == 0 {
        return Ok(Temperatures { psi: Vec::new() });
    }
    let a = p.dissipation_diagonal(cfg.lambda);
    let mut system: Vec<f64> = p.as_dense().iter().map(|v| -v).collect();
    for m in 0..n {
        system[m * n + m] = a[m];
    }
    let original = system.clone();
    linalg::cholesky_in_place(&mut system, n, exec).map_err(|e| {
        DiffusionError::SingularSystem {
            residual: e.pivot.abs().recip(),
        }
    })?;
    let ones = vec![1.0; n];
    let col_sums = linalg::cholesky_solve(&system, n, &ones);
    let residual = relative_residual(&original, &col_sums, &ones);
    if !(residual <= cfg.solve_tolerance) {
        return Err(DiffusionError::SingularSystem { residual });
    }
    let diag = linalg::inverse_diagonal(&system, n, exec);
    let upper = n as f64;
    let psi = col_sums
        .iter()
        .zip(&diag)
        .map(|(s, d)| {
            let psi = s / d;
            debug_assert!(
                psi >= 1.0 - 1e-9 && psi <= upper * (1.0 + 1e-9),
                "psi {psi} outside [1, {upper}]"
            );
            // only rounding can push psi past its bounds
            psi.clamp(1.0, upper)
        })
        .collect();
    Ok(Temperatures { psi })
}

/// `w_l = 1/ψ_l`.
pub fn heat_weights(t: &Temperatures) -> Vec<f64> {
    t.psi
        .iter()
        .map(|&psi| {
            debug_assert!(psi >= 1.0);
            1.0 / psi
        })
        .collect()
}

/// Temperature gains when an external node (the query) is the unit source.
///
/// `source` holds each node's similarity to the source, `coupling` the
/// node-node similarities. Solves `(I − Λ⁻¹Q₂)·μ = Λ⁻¹Q₁` with
/// `a_m = Q₁(m) + Σ_k Q₂(m,k) + λ`.
pub fn source_gains(
    source: &[f64],
    coupling: &SimilarityMatrix,
    cfg: &DiffusionConfig,
) -> Result<Vec<f64>, DiffusionError> {
    cfg.validate()?;
    let k = coupling.n();
    if source.len() != k {
        return Err(DiffusionError::DimMismatch {
            expected: k,
            found: source.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut system: Vec<f64> = coupling.as_dense().iter().map(|v| -v).collect();
    for m in 0..k {
        system[m * k + m] = source[m] + coupling.row(m).iter().sum::<f64>() + cfg.lambda;
    }
    let original = system.clone();
    let gains = match linalg::cholesky_in_place(&mut system, k, Execution::Sequential) {
        Ok(()) => linalg::cholesky_solve(&system, k, source),
        // Unclamped similarities can break definiteness.
        Err(_) => solve_general(original.clone(), source.to_vec()).ok_or(
            DiffusionError::SingularSystem {
                residual: f64::INFINITY,
            },
        )?,
    };
    let residual = relative_residual(&original, &gains, source);
    if source.iter().any(|&v| v != 0.0) && !(residual <= cfg.solve_tolerance) {
        return Err(DiffusionError::SingularSystem { residual });
    }
    Ok(gains)
}
