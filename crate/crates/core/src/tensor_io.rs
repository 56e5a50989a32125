//! HFT1 feature tensors and their flattening into feature sets.
//!
//! Layout (little-endian): `"HFT1"`, version `u32 = 1`, `W u32`, `H u32`,
//! `K u32`, reserved `u32 = 0`, then `W·H·K` `f32` values, channel-contiguous
//! per location, locations ordered by `l = i + (j-1)·W`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"HFT1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic at byte offset {offset}: expected \"HFT1\"")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at byte offset {offset}")]
    UnsupportedVersion { version: u32, offset: usize },
    #[error("invalid shape W={width} H={height} K={channels}: every extent must be positive")]
    InvalidShape {
        width: u32,
        height: u32,
        channels: u32,
    },
    #[error("truncated file: expected {expected} bytes, found {found} (data ends at byte offset {found})")]
    TruncatedFile { expected: usize, found: usize },
    #[error("trailing bytes after payload starting at byte offset {offset}")]
    TrailingBytes { offset: usize },
    #[error("negative or non-finite value {value} at byte offset {offset}")]
    NegativeOrNonFiniteValue { value: f32, offset: usize },
    #[error("value count {found} does not match W·H·K = {expected}")]
    ValueCount { expected: usize, found: usize },
    #[error("every feature vector is all-zero")]
    EmptyFeatureSet,
    #[error("feature vectors must share one positive dimension")]
    RaggedFeatures,
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// A `W × H × K` block of non-negative activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    width: u32,
    height: u32,
    channels: u32,
    values: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(
        width: u32,
        height: u32,
        channels: u32,
        values: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(TensorError::InvalidShape {
                width,
                height,
                channels,
            });
        }
        let expected = width as usize * height as usize * channels as usize;
        if values.len() != expected {
            return Err(TensorError::ValueCount {
                expected,
                found: values.len(),
            });
        }
        if let Some((i, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(TensorError::NegativeOrNonFiniteValue {
                value: v,
                offset: HEADER_LEN + 4 * i,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn locations(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Feature at 1-based spatial coordinates `(i, j)`, `1 ≤ i ≤ W`, `1 ≤ j ≤ H`.
    pub fn location(&self, i: u32, j: u32) -> &[f32] {
        assert!((1..=self.width).contains(&i) && (1..=self.height).contains(&j));
        let l = (i - 1) as usize + (j - 1) as usize * self.width as usize;
        let k = self.channels as usize;
        &self.values[l * k..(l + 1) * k]
    }

    /// Serializes to the exact HFT1 byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for word in [VERSION, self.width, self.height, self.channels, 0] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(TensorError::BadMagic { offset: 0 });
        }
        if bytes.len() < HEADER_LEN {
            return Err(TensorError::TruncatedFile {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion { version, offset: 4 });
        }
        let (width, height, channels) = (word(8), word(12), word(16));
        if width == 0 || height == 0 || channels == 0 {
            return Err(TensorError::InvalidShape {
                width,
                height,
                channels,
            });
        }
        let count = width as usize * height as usize * channels as usize;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(TensorError::TruncatedFile {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(TensorError::TrailingBytes { offset: expected });
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(width, height, channels, values)
    }
}

pub fn read_feature_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    FeatureTensor::from_bytes(&bytes)
}

pub fn write_feature_tensor(
    tensor: &FeatureTensor,
    path: impl AsRef<Path>,
) -> Result<(), TensorError> {
    let path = path.as_ref();
    write_atomic(path, &tensor.to_bytes()).map_err(|source| TensorError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// The non-zero local features of one image, in location order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
    dropped: usize,
}

impl FeatureSet {
    /// Builds a set from explicit vectors, dropping any that are all-zero.
    pub fn from_vectors<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Self, TensorError> {
        let dim = vectors.first().map(|v| v.as_ref().len()).unwrap_or(0);
        if dim == 0 || vectors.iter().any(|v| v.as_ref().len() != dim) {
            return Err(TensorError::RaggedFeatures);
        }
        let mut data = Vec::with_capacity(vectors.len() * dim);
        let mut dropped = 0;
        for v in vectors {
            let v = v.as_ref();
            if v.iter().all(|&x| x == 0.0) {
                dropped += 1;
            } else {
                data.extend_from_slice(v);
            }
        }
        if data.is_empty() {
            return Err(TensorError::EmptyFeatureSet);
        }
        Ok(Self { dim, data, dropped })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dropped_count(&self) -> usize {
        self.dropped
    }

    pub fn feature(&self, l: usize) -> &[f64] {
        &self.data[l * self.dim..(l + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major `len × dim` storage.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Flattens a tensor into its location-ordered feature set, dropping
/// all-zero vectors.
pub fn flatten(tensor: &FeatureTensor) -> Result<FeatureSet, TensorError> {
    let k = tensor.channels as usize;
    let mut data = Vec::with_capacity(tensor.values.len());
    let mut dropped = 0;
    for loc in tensor.values.chunks_exact(k) {
        if loc.iter().all(|&x| x == 0.0) {
            dropped += 1;
        } else {
            data.extend(loc.iter().map(|&x| x as f64));
        }
    }
    if data.is_empty() {
        return Err(TensorError::EmptyFeatureSet);
    }
    Ok(FeatureSet {
        dim: k,
        data,
        dropped,
    })
}
