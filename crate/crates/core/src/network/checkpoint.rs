//! Checkpoint container: magic, little-endian header length, JSON header,
//! then the raw little-endian tensor blob.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use edgeseg_tensor::{Shape5, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ENCODER_PREFIX};
use crate::{Error, Result, Scalar};

const MAGIC: &[u8; 8] = b"EDGESEG1";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// `[n, c, x, y, z]`
    pub shape: [usize; 5],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub topology_hash: String,
    pub encoder_hash: String,
    pub topology: String,
    pub mode: String,
    pub iteration: u64,
    /// Free-form state owned by the caller (optimizer settings, config echo).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus metadata, in insertion order.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    tensors: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, tensors: Vec::new(), index: HashMap::new() }
    }

    /// All parameters of `model`, tagged with its hashes.
    pub fn from_model(model: &Model<T>, iteration: u64) -> Self {
        let mut ck = Checkpoint::new(CheckpointMeta {
            topology_hash: model.topology_hash(),
            encoder_hash: model.encoder_hash(),
            topology: model.topology(),
            mode: model.mode().to_string(),
            iteration,
            extra: serde_json::Value::Null,
        });
        for (_, p) in model.params().iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck
    }

    /// Adds or replaces a tensor.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.tensors.len());
                self.tensors.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn rename(&mut self, from: &str, to: &str) -> bool {
        let Some(i) = self.index.remove(from) else { return false };
        self.tensors[i].0 = to.to_string();
        self.index.insert(to.to_string(), i);
        true
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            let s = t.shape();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [s.n, s.c, s.x, s.y, s.z],
                dtype: T::DTYPE.to_string(),
                offset,
                bytes: blob.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })
            .map_err(|e| Error::Contract(format!("checkpoint header does not serialize: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses a checkpoint; `path` only labels errors. Stored `f32`/`f64`
    /// data is converted to `T`.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap_or_else(|_| unreachable!()));
        if header_len > MAX_HEADER {
            return Err(Error::format(path, format!("implausible header length {header_len}")));
        }
        let header_end = 16 + header_len as usize;
        if bytes.len() < header_end {
            return Err(Error::Truncation { path: path.display().to_string(), expected: header_end, found: bytes.len() });
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let blob = &bytes[header_end..];
        let mut ck = Checkpoint::new(header.meta);
        for e in header.tensors {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::format(path, format!("tensor {}: unknown dtype {other:?}", e.name))),
            };
            let [n, c, x, y, z] = e.shape;
            let shape = Shape5::new(n, c, x, y, z);
            if e.bytes != (shape.len() * width) as u64 {
                return Err(Error::format(path, format!("tensor {}: {} bytes do not match shape {shape}", e.name, e.bytes)));
            }
            let end = e.offset.checked_add(e.bytes).filter(|&end| end <= blob.len() as u64).ok_or_else(|| {
                Error::Truncation {
                    path: path.display().to_string(),
                    expected: (header_end as u64).saturating_add(e.offset).saturating_add(e.bytes) as usize,
                    found: bytes.len(),
                }
            })?;
            let raw = &blob[e.offset as usize..end as usize];
            let data: Vec<T> = match width {
                4 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
                _ => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
            };
            if ck.index.contains_key(&e.name) {
                return Err(Error::format(path, format!("duplicate tensor {}", e.name)));
            }
            ck.push(e.name, Tensor::from_vec(shape, data));
        }
        Ok(ck)
    }

    /// Overwrites every parameter of `model`; the topology must match exactly.
    pub fn restore_model(&self, model: &mut Model<T>) -> Result<()> {
        if self.meta.topology_hash != model.topology_hash() {
            return Err(Error::Load(format!(
                "checkpoint topology ({} mode, hash {}) does not match the model ({} mode, hash {})",
                self.meta.mode,
                short(&self.meta.topology_hash),
                model.mode(),
                short(&model.topology_hash())
            )));
        }
        let ids: Vec<_> = model.params().ids().collect();
        let mut missing = Vec::new();
        for &id in &ids {
            let name = model.params().name(id);
            match self.get(name) {
                Some(t) if t.shape() == model.params().get(id).shape() => {}
                _ => missing.push(name.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Load(format!("checkpoint lacks or misshapes: {}", missing.join(", "))));
        }
        for id in ids {
            let t = self.get(model.params().name(id)).cloned().unwrap_or_else(|| unreachable!());
            *model.params_mut().get_mut(id) = t;
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Outcome of an encoder transfer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Encoder tensors in the checkpoint that were not applied.
    pub skipped: Vec<String>,
    /// Encoder parameters of the model left at their previous values.
    pub missing: Vec<String>,
}

/// Copies encoder parameters whose name and shape match from the checkpoint
/// at `path` into `model`; nothing outside the encoder is touched.
///
/// With `strict`, any name or shape disagreement, or an encoder topology
/// hash mismatch, fails without modifying the model.
pub fn load_encoder_checkpoint<T: Scalar>(model: &mut Model<T>, path: &Path, strict: bool) -> Result<LoadReport> {
    let ck = Checkpoint::<T>::load(path)?;
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    for (name, t) in ck.tensors().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)) {
        match model.params().id(name) {
            Some(id) if model.params().get(id).shape() == t.shape() => updates.push((id, t.clone())),
            _ => report.skipped.push(name.to_string()),
        }
    }
    for (id, p) in model.params().iter() {
        if p.name.starts_with(ENCODER_PREFIX) && !updates.iter().any(|(u, _)| *u == id) {
            report.missing.push(p.name.clone());
        }
    }
    if strict {
        let mut problems: Vec<String> = report.skipped.iter().chain(&report.missing).cloned().collect();
        problems.sort();
        problems.dedup();
        if !problems.is_empty() {
            return Err(Error::Load(format!("encoder tensors do not match: {}", problems.join(", "))));
        }
        if ck.meta.encoder_hash != model.encoder_hash() {
            return Err(Error::Load(format!(
                "encoder topology hash {} does not match the model's {}",
                short(&ck.meta.encoder_hash),
                short(&model.encoder_hash())
            )));
        }
    }
    report.loaded = updates.len();
    for (id, t) in updates {
        *model.params_mut().get_mut(id) = t;
    }
    Ok(report)
}
