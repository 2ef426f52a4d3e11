//! Precomputed layer stacks ("frozen features").
//!
//! Layout, little-endian:
//!
//! ```text
//! b"LAPF" | u32 version = 1 | u32 m | u32 layers | u32 dim
//! m × layers × (dim f32 [CLS] values, dim f32 mean-token values)
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::{self, LeReader};
use crate::numeric::Matrix;

use super::stack::LayerStack;

pub const MAGIC: &[u8; 4] = b"LAPF";
pub const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatures {
    pub layers: usize,
    pub dim: usize,
    pub stacks: Vec<LayerStack>,
}

impl FrozenFeatures {
    pub fn new(stacks: Vec<LayerStack>) -> Result<Self> {
        let first = stacks.first().ok_or(Error::EmptyInput("frozen features"))?;
        let (layers, dim) = (first.layers(), first.dim());
        if stacks.iter().any(|s| s.layers() != layers || s.dim() != dim) {
            return Err(Error::Shape("frozen stacks differ in layer count or dimension".into()));
        }
        Ok(Self { layers, dim, stacks })
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES as usize + self.len() * self.layers * self.dim * 8);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, self.layers as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.stacks {
            for i in 0..self.layers {
                for &v in s.cls.row(i).iter().chain(s.avg.row(i)) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        let truncated = || Error::Truncated { path: path.into(), expected: HEADER_BYTES, found: bytes.len() as u64 };
        if r.take(4).ok_or_else(truncated)? != MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "LAPF" });
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let m = r.u32().ok_or_else(truncated)? as usize;
        let layers = r.u32().ok_or_else(truncated)? as usize;
        let dim = r.u32().ok_or_else(truncated)? as usize;
        for (field, v) in [("layers", layers), ("dim", dim)] {
            if v == 0 {
                return Err(Error::ZeroDimension { path: path.into(), field });
            }
        }
        let expected = HEADER_BYTES + (m * layers * dim * 2 * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() as u64 });
        }
        let mut stacks = Vec::with_capacity(m);
        for _ in 0..m {
            let mut cls = Matrix::zeros(layers, dim);
            let mut avg = Matrix::zeros(layers, dim);
            for i in 0..layers {
                for target in [&mut cls, &mut avg] {
                    for v in target.row_mut(i) {
                        *v = r.f32().expect("length checked") as f64;
                    }
                }
            }
            stacks.push(LayerStack { cls, avg });
        }
        Ok(Self { layers, dim, stacks })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?, path)
    }
}

/// Frozen features addressed by sentence text.
#[derive(Clone, Debug)]
pub struct FrozenSource {
    pub features: FrozenFeatures,
    index: HashMap<String, usize>,
}

impl FrozenSource {
    /// `texts[i]` names `features.stacks[i]`.
    pub fn new(features: FrozenFeatures, texts: Vec<String>) -> Result<Self> {
        if texts.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} texts for {} frozen feature stacks",
                texts.len(),
                features.len()
            )));
        }
        let index = texts.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Self { features, index })
    }

    pub fn lookup(&self, text: &str) -> Result<&LayerStack> {
        self.index
            .get(text)
            .map(|&i| &self.features.stacks[i])
            .ok_or_else(|| Error::UnknownText(text.to_string()))
    }
}
