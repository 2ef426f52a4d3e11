//! Checkpoint directories: `manifest.json` plus one raw little-endian f64
//! file per tensor group (parameters and the two Adam moments), each
//! holding the tensors in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::SourceSpec;
use crate::numeric::{Matrix, RngState};
use crate::params::ParamSet;

use super::adam::Adam;
use super::TrainConfig;

pub const FORMAT: &str = "layerpool-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub source: SourceSpec,
    pub params: ParamSet,
    pub adam: Adam,
    /// Completed optimization steps.
    pub step: u64,
    /// Root stream of the run; every per-step stream derives from it.
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    rng: RngState,
    config: TrainConfig,
    source: SourceSpec,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
    files: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    group: String,
    file: String,
    bytes: u64,
    /// FNV-1a 64 of the file contents, hex.
    checksum: String,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    fn group(&self, g: &str) -> &ParamSet {
        match g {
            "param" => &self.params,
            "adam_m" => &self.adam.m,
            _ => &self.adam.v,
        }
    }

    /// Writes tensor files first and the manifest last, each atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(name, m)| TensorEntry { name: name.to_string(), shape: [m.rows(), m.cols()] })
            .collect();
        let mut files = Vec::new();
        for g in GROUPS {
            let set = self.group(g);
            let mut bytes = Vec::with_capacity(set.num_scalars() * 8);
            for t in &tensors {
                let m = set.get(&t.name).ok_or_else(|| corrupt(format!("{g} is missing `{}`", t.name)))?;
                m.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            }
            let file = format!("{g}.f64");
            fsio::write_atomic(&dir.join(&file), &bytes)?;
            files.push(FileEntry { group: g.to_string(), file, bytes: bytes.len() as u64, checksum: fnv1a(&bytes) });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            step: self.step,
            rng: self.rng,
            config: self.config.clone(),
            source: self.source.clone(),
            adam_t: self.adam.t,
            tensors,
            files,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fsio::write_atomic(&dir.join(MANIFEST), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fsio::read_to_string(&dir.join(MANIFEST))?;
        let raw: Value = serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if raw.get("format").and_then(Value::as_str) != Some(FORMAT) {
            return Err(corrupt("manifest is not a layerpool checkpoint"));
        }
        let version = raw.get("version").and_then(Value::as_u64).ok_or_else(|| corrupt("manifest has no version"))?;
        if version != VERSION as u64 {
            return Err(Error::Version { found: version as u32, expected: VERSION });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))?;

        let mut sets = Vec::new();
        for g in GROUPS {
            let entry = manifest
                .files
                .iter()
                .find(|f| f.group == g)
                .ok_or_else(|| corrupt(format!("manifest lists no {g} file")))?;
            if entry.file.contains(['/', '\\']) {
                return Err(corrupt(format!("tensor file name {:?} is not local", entry.file)));
            }
            let bytes = fsio::read(&dir.join(&entry.file))?;
            if bytes.len() as u64 != entry.bytes {
                return Err(corrupt(format!("{} holds {} bytes, manifest says {}", entry.file, bytes.len(), entry.bytes)));
            }
            if fnv1a(&bytes) != entry.checksum {
                return Err(corrupt(format!("{} fails its checksum", entry.file)));
            }
            let mut set = ParamSet::new();
            let mut chunks = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            for t in &manifest.tensors {
                let n = t.shape[0] * t.shape[1];
                let data: Vec<f64> = chunks.by_ref().take(n).collect();
                if data.len() != n {
                    return Err(corrupt(format!("{} ends inside `{}`", entry.file, t.name)));
                }
                set.insert(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data)?);
            }
            if chunks.next().is_some() {
                return Err(corrupt(format!("{} has trailing data", entry.file)));
            }
            sets.push(set);
        }
        let v = sets.pop().expect("three groups");
        let m = sets.pop().expect("three groups");
        let params = sets.pop().expect("three groups");
        let adam = Adam { learning_rate: manifest.config.learning_rate, t: manifest.adam_t, m, v };
        Ok(Self { config: manifest.config, source: manifest.source, params, adam, step: manifest.step, rng: manifest.rng })
    }
}
