//! Inverted-file index with exact scoring inside probed lists.
//!
//! On disk an index is a directory:
//!
//! ```text
//! header.json    format, version, m, d, nlist, metric, list sizes
//! centroids.f32  nlist × d f32 LE
//! lists.u32      posting lists back to back, u32 LE row positions
//! vectors.lape   the indexed embeddings
//! ```

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{self, LeReader};
use crate::numeric::Rng;

use super::kmeans::{kmeans_fit, nearest};
use super::{dot32, EmbeddingMatrix};

pub const DEFAULT_NLIST: usize = 64;
pub const DEFAULT_NPROBE: usize = 8;
pub const KMEANS_MAX_ITERS: usize = 50;

const FORMAT: &str = "layerpool-ivf";
const VERSION: u32 = 1;
const HEADER: &str = "header.json";
const CENTROIDS: &str = "centroids.f32";
const LISTS: &str = "lists.u32";
const VECTORS: &str = "vectors.lape";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexHeader {
    pub format: String,
    pub version: u32,
    pub m: usize,
    pub d: usize,
    pub nlist: usize,
    pub metric: String,
    pub list_sizes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u32,
    pub similarity: f64,
}

/// Descending similarity, then ascending id.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.similarity.partial_cmp(&a.similarity).unwrap_or(Ordering::Equal).then(a.id.cmp(&b.id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfIndex {
    nlist: usize,
    /// `nlist × d` f32 centroids.
    centroids: Vec<f32>,
    /// Row positions into `vectors`, one list per centroid.
    lists: Vec<Vec<u32>>,
    vectors: EmbeddingMatrix,
}

impl IvfIndex {
    /// Fits `nlist` centroids and files every row under its nearest one.
    pub fn build(vectors: EmbeddingMatrix, nlist: usize, rng: &mut Rng) -> Result<Self> {
        if nlist == 0 || nlist > vectors.len() {
            return Err(Error::invalid("nlist", format!("{nlist} lists for {} vectors", vectors.len())));
        }
        let km = kmeans_fit(&vectors, nlist, rng, KMEANS_MAX_ITERS)?;
        let centroids: Vec<f32> = km.centroids.iter().map(|&v| v as f32).collect();
        Ok(Self::from_parts(vectors, centroids))
    }

    /// Assigns rows against the stored (f32) centroids.
    fn from_parts(vectors: EmbeddingMatrix, centroids: Vec<f32>) -> Self {
        let dim = vectors.dim();
        let nlist = centroids.len() / dim;
        let wide: Vec<f64> = centroids.iter().map(|&v| v as f64).collect();
        let mut lists = vec![Vec::new(); nlist];
        for i in 0..vectors.len() {
            lists[nearest(vectors.row(i), &wide, dim).0].push(i as u32);
        }
        Self { nlist, centroids, lists, vectors }
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        let d = self.dim();
        &self.centroids[c * d..(c + 1) * d]
    }

    /// Posting lists as row ids.
    pub fn list_ids(&self, c: usize) -> Vec<u32> {
        self.lists[c].iter().map(|&p| self.vectors.ids()[p as usize]).collect()
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    pub fn contains(&self, id: u32) -> bool {
        self.vectors.ids().contains(&id)
    }

    /// Bytes of centroids, posting ids and stored vectors.
    pub fn memory_bytes(&self) -> usize {
        4 * self.centroids.len() + 4 * self.vectors.len() + self.vectors.payload_bytes()
    }

    fn unit_query(&self, q: &[f64]) -> Result<Vec<f32>> {
        if q.len() != self.dim() {
            return Err(Error::Shape(format!("query of dim {} against index of dim {}", q.len(), self.dim())));
        }
        let n = crate::numeric::norm(q);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateEmbedding { index: 0 });
        }
        Ok(q.iter().map(|v| (v / n) as f32).collect())
    }

    /// Centroids ordered by distance to `q`, ties by index.
    fn probe_order(&self, q: &[f32]) -> Vec<usize> {
        let dist: Vec<f64> = (0..self.nlist)
            .map(|c| q.iter().zip(self.centroid(c)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
            .collect();
        let mut order: Vec<usize> = (0..self.nlist).collect();
        order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        order
    }

    fn top(&self, q: &[f32], positions: impl Iterator<Item = usize>, top_k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = positions
            .map(|p| Hit { id: self.vectors.ids()[p], similarity: dot32(q, self.vectors.row(p)) })
            .collect();
        hits.sort_by(rank);
        hits.truncate(top_k);
        hits
    }

    /// Up to `top_k` rows from the `nprobe` nearest lists, best first.
    pub fn query(&self, q: &[f64], top_k: usize, nprobe: usize) -> Result<Vec<Hit>> {
        if top_k == 0 {
            return Err(Error::invalid("top_k", "must be at least 1"));
        }
        if nprobe == 0 || nprobe > self.nlist {
            return Err(Error::invalid("nprobe", format!("{nprobe} outside 1..={}", self.nlist)));
        }
        let q = self.unit_query(q)?;
        let probed = self.probe_order(&q).into_iter().take(nprobe);
        Ok(self.top(&q, probed.flat_map(|c| self.lists[c].iter().map(|&p| p as usize)), top_k))
    }

    /// Exact scan over every row.
    pub fn brute_force(&self, q: &[f64], top_k: usize) -> Result<Vec<Hit>> {
        let q = self.unit_query(q)?;
        Ok(self.top(&q, 0..self.len(), top_k))
    }

    pub fn header(&self) -> IndexHeader {
        IndexHeader {
            format: FORMAT.into(),
            version: VERSION,
            m: self.len(),
            d: self.dim(),
            nlist: self.nlist,
            metric: "cosine".into(),
            list_sizes: self.list_sizes(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let centroids: Vec<u8> = self.centroids.iter().flat_map(|v| v.to_le_bytes()).collect();
        let lists: Vec<u8> = self.lists.iter().flatten().flat_map(|p| p.to_le_bytes()).collect();
        fsio::write_atomic(&dir.join(CENTROIDS), &centroids)?;
        fsio::write_atomic(&dir.join(LISTS), &lists)?;
        self.vectors.save(&dir.join(VECTORS))?;
        let mut json = serde_json::to_string_pretty(&self.header())?;
        json.push('\n');
        fsio::write_atomic(&dir.join(HEADER), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(HEADER);
        let header: IndexHeader = serde_json::from_str(&fsio::read_to_string(&path)?)?;
        if header.format != FORMAT {
            return Err(Error::BadMagic { path, expected: FORMAT });
        }
        if header.version != VERSION {
            return Err(Error::Version { found: header.version, expected: VERSION });
        }
        if header.metric != "cosine" {
            return Err(Error::invalid("metric", format!("unsupported metric {:?}", header.metric)));
        }
        let vectors = EmbeddingMatrix::load(&dir.join(VECTORS))?;
        let (m, d, nlist) = (header.m, header.d, header.nlist);
        if vectors.len() != m || vectors.dim() != d {
            return Err(Error::Shape(format!("header says {m}×{d}, vectors are {}×{}", vectors.len(), vectors.dim())));
        }
        if nlist == 0 || header.list_sizes.len() != nlist || header.list_sizes.iter().sum::<usize>() != m {
            return Err(Error::Shape("posting list sizes do not partition the rows".into()));
        }
        let read_exact = |name: &str, n: usize| -> Result<Vec<u8>> {
            let p = dir.join(name);
            let bytes = fsio::read(&p)?;
            if bytes.len() != 4 * n {
                return Err(Error::Truncated { path: p, expected: 4 * n as u64, found: bytes.len() as u64 });
            }
            Ok(bytes)
        };
        let bytes = read_exact(CENTROIDS, nlist * d)?;
        let mut r = LeReader::new(&bytes);
        let centroids: Vec<f32> = (0..nlist * d).map(|_| r.f32().expect("length checked")).collect();
        let bytes = read_exact(LISTS, m)?;
        let mut r = LeReader::new(&bytes);
        let mut seen = vec![false; m];
        let mut lists = Vec::with_capacity(nlist);
        for &size in &header.list_sizes {
            let list: Vec<u32> = (0..size).map(|_| r.u32().expect("length checked")).collect();
            for &p in &list {
                if p as usize >= m || std::mem::replace(&mut seen[p as usize], true) {
                    return Err(Error::Shape(format!("posting lists repeat or exceed row {p}")));
                }
            }
            lists.push(list);
        }
        Ok(Self { nlist, centroids, lists, vectors })
    }
}
