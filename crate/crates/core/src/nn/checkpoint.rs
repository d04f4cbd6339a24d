//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"RFCKPT01"                      8-byte magic
//! u64 little-endian                manifest length in bytes
//! manifest                         UTF-8 JSON (see `Manifest`)
//! f32 little-endian arrays         parameters in manifest order, then
//!                                  running mean and variance per BN layer
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, Param};
use super::spec::NetworkSpec;
use crate::autodiff::BatchNormState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RFCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec_hash: String,
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
    bn_updates: Vec<u64>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec_hash: model.spec().hash(),
        spec: model.spec().clone(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() })
            .collect(),
        bn_updates: model.bn_states().iter().map(|s| s.updates).collect(),
        metadata: model.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vals: &[f32]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for p in model.params() {
        put(p.tensor.data());
    }
    for s in model.bn_states() {
        put(&s.running_mean);
        put(&s.running_var);
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

/// Parses checkpoint bytes against `spec`; the spec hash must match.
pub fn read_checkpoint(spec: &NetworkSpec, bytes: &[u8]) -> Result<Model> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| err(format!("truncated manifest: need {len} bytes at offset 16")))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| err(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(err(format!("format version {} unsupported", manifest.format_version)));
    }
    if manifest.spec_hash != spec.hash() {
        return Err(err(describe_mismatch(&manifest.spec, spec)));
    }
    let mut offset = 16 + len;
    let mut take = |n: usize| -> Result<Vec<f32>> {
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| {
            err(format!("truncated data: need {} bytes at offset {offset}, file has {}", 4 * n, bytes.len()))
        })?;
        offset += 4 * n;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let data = take(entry.shape.iter().product())?;
        params.push(Param { name: entry.name.clone(), tensor: Tensor::new(entry.shape.clone(), data)? });
    }
    let features = spec.feature_counts()?;
    if features.len() != manifest.bn_updates.len() {
        return Err(err("normalization layer count does not match spec".into()));
    }
    let mut bn = Vec::with_capacity(features.len());
    for (&f, &updates) in features.iter().zip(&manifest.bn_updates) {
        let running_mean = take(f)?;
        let running_var = take(f)?;
        bn.push(BatchNormState { running_mean, running_var, updates });
    }
    if offset != bytes.len() {
        return Err(err(format!("{} trailing bytes after data", bytes.len() - offset)));
    }
    Model::from_parts(spec.clone(), params, bn, manifest.metadata)
}

pub fn load_checkpoint(spec: &NetworkSpec, path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(spec, &bytes)
}

fn describe_mismatch(stored: &NetworkSpec, wanted: &NetworkSpec) -> String {
    if stored.input_shape != wanted.input_shape {
        return format!(
            "spec mismatch: checkpoint input shape {:?}, spec {:?}",
            stored.input_shape, wanted.input_shape
        );
    }
    for (i, (a, b)) in stored.layers.iter().zip(&wanted.layers).enumerate() {
        if a != b {
            return format!("spec mismatch at layer {i}: checkpoint has {a:?}, spec has {b:?}");
        }
    }
    if stored.layers.len() != wanted.layers.len() {
        return format!(
            "spec mismatch: checkpoint has {} layers, spec has {}",
            stored.layers.len(),
            wanted.layers.len()
        );
    }
    format!(
        "spec mismatch: checkpoint spec `{}` differs from `{}` outside the layer list",
        stored.name, wanted.name
    )
}
