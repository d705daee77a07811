//! Raw tensor dumps: one little-endian `f32` file per tensor plus a JSON
//! manifest describing names, shapes and caller-supplied metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named collection of tensors kept in insertion-independent (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ArrayD<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Config(format!("tensor '{name}' missing from store")))
    }

    pub fn save(&self, dir: &Path, kind: &str, meta: serde_json::Value) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = format!("{i:05}.f32");
            let path = dir.join(&file);
            fs::write(&path, f32_le_bytes(t)).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry { name: name.clone(), file, shape: t.shape().to_vec() });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_vec_pretty(&manifest)?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported tensor dump version {}",
                manifest.format_version
            )));
        }
        let mut store = TensorStore::new();
        for entry in &manifest.tensors {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let expected: usize = entry.shape.iter().product();
            if bytes.len() != expected * 4 {
                return Err(Error::Shape(format!(
                    "{}: {} bytes on disk, shape {:?} needs {}",
                    entry.file,
                    bytes.len(),
                    entry.shape,
                    expected * 4
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Shape(e.to_string()))?;
            store.insert(entry.name.clone(), t);
        }
        Ok((store, manifest))
    }
}

pub fn f32_le_bytes<'a, I>(values: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a f32>,
{
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Hex SHA-256 over the little-endian bytes of a sequence of floats.
pub fn hash_f32<'a, I>(values: I) -> String
where
    I: IntoIterator<Item = &'a f32>,
{
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
