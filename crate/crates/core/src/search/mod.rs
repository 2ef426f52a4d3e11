//! IVF-flat semantic search over unit-normalized f32 embeddings.
//!
//! Embedding files, little-endian:
//!
//! ```text
//! b"LAPE" | u32 version = 1 | u32 m | u32 d
//! m × u32 row ids | m × d f32 values
//! ```

mod ivf;
mod kmeans;
mod metrics;

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::{self, LeReader};
use crate::model::{InferencePooling, Model};
use crate::numeric::Matrix;

pub use ivf::{Hit, IndexHeader, IvfIndex, DEFAULT_NLIST, DEFAULT_NPROBE, KMEANS_MAX_ITERS};
pub use kmeans::{kmeans_fit, KMeans};
pub use metrics::{evaluate_search, reciprocal_rank, SearchMetrics, MRR_CUTOFF, TIMED_QUERIES};

pub const MAGIC: &[u8; 4] = b"LAPE";
pub const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 16;

/// Unit-normalized embedding rows in f32, each with an id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<u32>,
    data: Vec<f32>,
}

/// f64 dot product of two f32 rows, accumulated left to right.
pub(crate) fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

impl EmbeddingMatrix {
    /// Normalizes each row; ids default to row positions.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let rows: Vec<&[f64]> = (0..m.rows()).map(|r| m.row(r)).collect();
        Self::from_rows(m.cols(), &rows, None)
    }

    pub fn from_rows(dim: usize, rows: &[&[f64]], ids: Option<Vec<u32>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("embeddings"));
        }
        if dim == 0 {
            return Err(Error::Shape("embeddings have zero dimension".into()));
        }
        let ids = ids.unwrap_or_else(|| (0..rows.len() as u32).collect());
        if ids.len() != rows.len() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!("row {i} has {} values, expected {dim}", row.len())));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("embedding rows"));
            }
            let n = crate::numeric::norm(row);
            if n == 0.0 {
                return Err(Error::DegenerateEmbedding { index: i });
            }
            data.extend(row.iter().map(|v| (v / n) as f32));
        }
        let out = Self { dim, ids, data };
        out.check_ids()?;
        Ok(out)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = self.ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("ids", "row ids must be distinct"));
        }
        Ok(())
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

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Bytes of stored ids and values.
    pub fn payload_bytes(&self) -> usize {
        4 * (self.ids.len() + self.data.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES as usize + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.ids.iter().for_each(|id| out.extend_from_slice(&id.to_le_bytes()));
        self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    /// Parses a file; rows are taken as stored, but zero rows are rejected.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        let truncated = |expected: u64| Error::Truncated { path: path.into(), expected, found: bytes.len() as u64 };
        if r.take(4).ok_or_else(|| truncated(HEADER_BYTES))? != MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "LAPE" });
        }
        let version = r.u32().ok_or_else(|| truncated(HEADER_BYTES))?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let m = r.u32().ok_or_else(|| truncated(HEADER_BYTES))? as usize;
        let dim = r.u32().ok_or_else(|| truncated(HEADER_BYTES))? as usize;
        for (field, v) in [("m", m), ("d", dim)] {
            if v == 0 {
                return Err(Error::ZeroDimension { path: path.into(), field });
            }
        }
        let expected = HEADER_BYTES + 4 * (m as u64) * (1 + dim as u64);
        if bytes.len() as u64 != expected {
            return Err(truncated(expected));
        }
        let ids: Vec<u32> = (0..m).map(|_| r.u32().expect("length checked")).collect();
        let data: Vec<f32> = (0..m * dim).map(|_| r.f32().expect("length checked")).collect();
        let out = Self { dim, ids, data };
        for i in 0..m {
            let row = out.row(i);
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("embedding file"));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateEmbedding { index: i });
            }
        }
        out.check_ids()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?, path)
    }
}

/// Unit-normalized embeddings of `texts` with dropout off.
pub fn embed_corpus(model: &Model, texts: &[&str], pooling: InferencePooling) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_matrix(&model.embed(texts, pooling)?)
}
