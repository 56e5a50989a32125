//! PCA whitening learned on a held-out set of aggregated descriptors.
//!
//! Model file layout (little-endian): `"HPCA"`, version `u32 = 1`, `D₀ u32`,
//! then the mean (`D₀ × f64`), the effective eigenvalues in descending order
//! (`D₀ × f64`), and the rotation rows (`D₀ × D₀ f64`, one principal
//! direction per row).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::aggregation::{normalize, ImageVector, Stage};
use crate::tensor_io::write_atomic;

pub const MAGIC: &[u8; 4] = b"HPCA";
pub const VERSION: u32 = 1;
/// Eigenvalue floor relative to the largest eigenvalue.
pub const DEFAULT_EPSILON_REL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum WhiteningError {
    #[error("need at least two training vectors with non-zero spread, got {count}")]
    InsufficientTrainingData { count: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("requested {requested} components but the model has {available}")]
    DimensionExceedsModel { requested: usize, available: usize },
    #[error("vector whitens to zero and has no direction")]
    DegenerateVector,
    #[error("malformed PCA model: {0}")]
    Malformed(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// Row-major `D₀ × D₀`; row `i` is the `i`-th principal direction.
    rotation: Vec<f64>,
    /// Variance along each direction, floor included.
    eigenvalues: Vec<f64>,
    scales: Vec<f64>,
    pub trained_on: String,
}

fn scales_for(eigenvalues: &[f64]) -> Vec<f64> {
    eigenvalues
        .iter()
        .map(|&e| if e > 0.0 { 1.0 / e.sqrt() } else { 0.0 })
        .collect()
}

/// Learns mean, rotation and scales with the default eigenvalue floor.
pub fn fit_pca(train: &[ImageVector]) -> Result<PcaModel, WhiteningError> {
    fit_pca_with(train, DEFAULT_EPSILON_REL)
}

/// Learns a model with `ε = epsilon_rel · (largest eigenvalue)` added to
/// every eigenvalue before inversion.
pub fn fit_pca_with(train: &[ImageVector], epsilon_rel: f64) -> Result<PcaModel, WhiteningError> {
    let count = train.len();
    if count < 2 {
        return Err(WhiteningError::InsufficientTrainingData { count });
    }
    let dim = train[0].dim();
    if let Some(bad) = train.iter().find(|v| v.dim() != dim) {
        return Err(WhiteningError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    if dim == 0 {
        return Err(WhiteningError::InsufficientTrainingData { count });
    }

    let mut mean = vec![0.0; dim];
    for v in train {
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let centered = DMatrix::from_fn(count, dim, |r, c| train[r].values[c] - mean[c]);
    let cov = (centered.transpose() * &centered) / count as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) || largest <= f64::EPSILON * mean.iter().map(|m| m * m).sum::<f64>() {
        return Err(WhiteningError::InsufficientTrainingData { count });
    }
    let floor = epsilon_rel * largest;

    let mut rotation = Vec::with_capacity(dim * dim);
    let mut eigenvalues = Vec::with_capacity(dim);
    for &col in &order {
        let dir = eig.eigenvectors.column(col);
        let pivot = (0..dim)
            .max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs()).then(b.cmp(&a)))
            .unwrap();
        let sign = if dir[pivot] < 0.0 { -1.0 } else { 1.0 };
        rotation.extend(dir.iter().map(|x| sign * x));
        eigenvalues.push(eig.eigenvalues[col].max(0.0) + floor);
    }
    let scales = scales_for(&eigenvalues);
    Ok(PcaModel {
        mean,
        rotation,
        eigenvalues,
        scales,
        trained_on: String::new(),
    })
}

impl PcaModel {
    pub fn source_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn direction(&self, i: usize) -> &[f64] {
        let d = self.source_dim();
        &self.rotation[i * d..(i + 1) * d]
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.trained_on = label.into();
        self
    }

    /// Centered, rotated and scaled coordinates, first `dims` only, not
    /// normalized.
    pub fn project(&self, v: &[f64], dims: usize) -> Result<Vec<f64>, WhiteningError> {
        let d0 = self.source_dim();
        if v.len() != d0 {
            return Err(WhiteningError::DimensionMismatch {
                expected: d0,
                found: v.len(),
            });
        }
        if dims == 0 || dims > d0 {
            return Err(WhiteningError::DimensionExceedsModel {
                requested: dims,
                available: d0,
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..dims)
            .map(|i| {
                let r = self.direction(i);
                r.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>() * self.scales[i]
            })
            .collect())
    }

    /// Whitens `v`, keeps the first `dims` components and re-normalizes.
    pub fn transform(&self, v: &ImageVector, dims: usize) -> Result<ImageVector, WhiteningError> {
        let mut out = self.project(&v.values, dims)?;
        normalize(&mut out).ok_or(WhiteningError::DegenerateVector)?;
        Ok(ImageVector::new(out, Stage::Whitened))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.source_dim();
        let mut out = Vec::with_capacity(12 + 8 * (2 * d + d * d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self
            .mean
            .iter()
            .chain(&self.eigenvalues)
            .chain(&self.rotation)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WhiteningError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(WhiteningError::Malformed("missing HPCA magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(WhiteningError::Malformed(format!(
                "unsupported version {version}"
            )));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + 8 * (2 * d + d * d);
        if d == 0 || bytes.len() != expected {
            return Err(WhiteningError::Malformed(format!(
                "expected {expected} bytes for D0={d}, found {}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if floats.iter().any(|v| !v.is_finite()) {
            return Err(WhiteningError::Malformed("non-finite value".into()));
        }
        let mean = floats[..d].to_vec();
        let eigenvalues = floats[d..2 * d].to_vec();
        let rotation = floats[2 * d..].to_vec();
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(WhiteningError::Malformed(
                "eigenvalues not in descending order".into(),
            ));
        }
        let scales = scales_for(&eigenvalues);
        Ok(Self {
            mean,
            rotation,
            eigenvalues,
            scales,
            trained_on: String::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WhiteningError> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes()).map_err(|source| WhiteningError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WhiteningError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| WhiteningError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_bytes(&bytes)?.with_label(label))
    }
}
