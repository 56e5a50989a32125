//! Weighted sum pooling with power normalization.

use thiserror::Error;

use crate::diffusion::{self, DiffusionConfig, DiffusionError};
use crate::exec::Execution;
use crate::tensor_io::FeatureSet;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("weighted feature sum is the zero vector")]
    ZeroAggregate,
    #[error("{weights} weights for {features} features")]
    LengthMismatch { features: usize, weights: usize },
    #[error("invalid weight {weight} at index {index}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Where a vector sits in the descriptor pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    RawAggregate,
    AlphaNormalized,
    Whitened,
}

impl Stage {
    pub fn code(self) -> u32 {
        match self {
            Stage::RawAggregate => 0,
            Stage::AlphaNormalized => 1,
            Stage::Whitened => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Stage::RawAggregate),
            1 => Some(Stage::AlphaNormalized),
            2 => Some(Stage::Whitened),
            _ => None,
        }
    }
}

/// A global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVector {
    pub values: Vec<f64>,
    pub stage: Stage,
}

impl ImageVector {
    pub fn new(values: Vec<f64>, stage: Stage) -> Self {
        Self { values, stage }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub const VECTOR_MAGIC: &[u8; 4] = b"HVEC";
pub const VECTOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VectorFileError {
    #[error("malformed vector file: {0}")]
    Malformed(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Single-descriptor file: `"HVEC"`, version `u32 = 1`, stage `u32`,
/// `D u32`, then `D` little-endian `f64`.
impl ImageVector {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dim());
        out.extend_from_slice(VECTOR_MAGIC);
        for w in [VECTOR_VERSION, self.stage.code(), self.dim() as u32] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VectorFileError> {
        let bad = |m: &str| VectorFileError::Malformed(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != VECTOR_MAGIC {
            return Err(bad("missing HVEC magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != VECTOR_VERSION {
            return Err(bad("unsupported version"));
        }
        let stage = Stage::from_code(word(8)).ok_or_else(|| bad("unknown stage"))?;
        let dim = word(12) as usize;
        if bytes.len() != 16 + 8 * dim {
            return Err(bad("payload length does not match dimension"));
        }
        let values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { values, stage })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), VectorFileError> {
        let path = path.as_ref();
        crate::tensor_io::write_atomic(path, &self.to_bytes()).map_err(|source| {
            VectorFileError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, VectorFileError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| VectorFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn normalize(values: &mut [f64]) -> Option<f64> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        values.iter_mut().for_each(|v| *v /= norm);
        Some(norm)
    } else {
        None
    }
}

/// `v = (Σ_l w_l f_l)^α / ‖(Σ_l w_l f_l)^α‖`.
pub fn aggregate(
    fs: &FeatureSet,
    weights: &[f64],
    alpha: f64,
) -> Result<ImageVector, AggregationError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AggregationError::InvalidAlpha(alpha));
    }
    if weights.len() != fs.len() {
        return Err(AggregationError::LengthMismatch {
            features: fs.len(),
            weights: weights.len(),
        });
    }
    if let Some((index, &weight)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
    {
        return Err(AggregationError::InvalidWeight { index, weight });
    }
    let mut sum = vec![0.0f64; fs.dim()];
    for (f, &w) in fs.iter().zip(weights) {
        for (s, x) in sum.iter_mut().zip(f) {
            *s += w * x;
        }
    }
    if alpha != 1.0 {
        sum.iter_mut().for_each(|s| *s = s.powf(alpha));
    }
    normalize(&mut sum).ok_or(AggregationError::ZeroAggregate)?;
    Ok(ImageVector::new(sum, Stage::AlphaNormalized))
}

/// Heat-weighted descriptor: similarities, temperatures, `1/ψ` weights,
/// then [`aggregate`].
pub fn hew_vector(
    fs: &FeatureSet,
    cfg: &DiffusionConfig,
    alpha: f64,
    exec: Execution,
) -> Result<ImageVector, AggregationError> {
    let weights = hew_weights(fs, cfg, exec)?;
    aggregate(fs, &weights, alpha)
}

pub fn hew_weights(
    fs: &FeatureSet,
    cfg: &DiffusionConfig,
    exec: Execution,
) -> Result<Vec<f64>, AggregationError> {
    let p = diffusion::similarity_matrix(fs, exec)?;
    let t = diffusion::temperatures_fast(&p, cfg, exec)?;
    Ok(diffusion::heat_weights(&t))
}

/// Unweighted baseline.
pub fn suma_vector(fs: &FeatureSet, alpha: f64) -> Result<ImageVector, AggregationError> {
    aggregate(fs, &vec![1.0; fs.len()], alpha)
}

/// Aggregation method used for a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Hew,
    Suma,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hew" => Ok(Method::Hew),
            "suma" => Ok(Method::Suma),
            other => Err(format!(
                "unknown aggregation method `{other}` (expected hew or suma)"
            )),
        }
    }
}

impl Method {
    pub fn apply(
        self,
        fs: &FeatureSet,
        cfg: &DiffusionConfig,
        alpha: f64,
        exec: Execution,
    ) -> Result<ImageVector, AggregationError> {
        match self {
            Method::Hew => hew_vector(fs, cfg, alpha, exec),
            Method::Suma => suma_vector(fs, alpha),
        }
    }
}

/// Aggregates many images. Images are spread across workers; each image's
/// own solve runs sequentially.
pub fn aggregate_batch(
    sets: &[FeatureSet],
    method: Method,
    cfg: &DiffusionConfig,
    alpha: f64,
    exec: Execution,
) -> Vec<Result<ImageVector, AggregationError>> {
    exec.map_slice(sets, |fs| {
        method.apply(fs, cfg, alpha, Execution::Sequential)
    })
}
