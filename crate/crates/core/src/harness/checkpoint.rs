//! Checkpoint directory: `manifest.json` plus a raw little-endian `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::MetricRow;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{ParamStore, Precision, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: Precision,
    pub step: usize,
    pub config: TrainConfig,
    pub metrics: Vec<MetricRow>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub params: ModelParams<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(config: TrainConfig, step: usize, metrics: Vec<MetricRow>, params: ModelParams<T>) -> Self {
        let mut offset = 0;
        let tensors = params
            .store
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() * T::BYTES;
                e
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                format_version: CHECKPOINT_VERSION,
                precision: T::PRECISION,
                step,
                config,
                metrics,
                tensors,
            },
            params,
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.store.num_scalars() * T::BYTES);
        for (_, t) in self.params.store.iter() {
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join(MANIFEST_FILE);
        fs::write(&m, self.manifest_json() + "\n").map_err(|e| Error::io(&m, e))?;
        let b = dir.join(BLOB_FILE);
        fs::write(&b, self.blob()).map_err(|e| Error::io(&b, e))
    }

    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.precision != T::PRECISION {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} parameters, loader expects {}",
                manifest.precision,
                T::PRECISION
            )));
        }
        let mut store = ParamStore::new();
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let bytes = n * T::BYTES;
            if e.offset != expected_offset || e.offset + bytes > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} ({:?} at byte {}) does not fit a {}-byte blob",
                    e.name,
                    e.shape,
                    e.offset,
                    blob.len()
                )));
            }
            let data = blob[e.offset..e.offset + bytes]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
            expected_offset += bytes;
        }
        if expected_offset != blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob has {} bytes, manifest describes {expected_offset}",
                blob.len()
            )));
        }
        let params = ModelParams::from_store(manifest.config.model_config(), store)?;
        Ok(Checkpoint { manifest, params })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = peek_manifest(dir)?;
        let b = dir.join(BLOB_FILE);
        let blob = fs::read(&b).map_err(|e| Error::io(&b, e))?;
        Self::from_parts(manifest, &blob)
    }
}

/// Reads only the manifest, e.g. to pick the precision before loading.
pub fn peek_manifest(dir: &Path) -> Result<Manifest> {
    let m = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", m.display())))
}
