//! Self-describing checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "ICLPCKPT"
//! u32       format version (currently 1)
//! u64       manifest length N
//! N bytes   manifest, UTF-8 JSON (see `Manifest`)
//! ...       raw tensor data, concatenated in manifest order, each element
//!           stored as f32 or f64 according to `manifest.dtype`
//! ```
//!
//! The manifest lists every parameter with its shape and element offset, the
//! model kind, the producing config and its hash, and optionally the PRNG
//! state. Writing the same store and metadata twice yields identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::RngState;
use crate::{Error, Float, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"ICLPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// What the parameters belong to, e.g. `"codec"` or `"lm"`.
    pub kind: String,
    pub dtype: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    /// Free-form metadata (vocabulary hash, upstream artifact hashes, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Metadata supplied when saving.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

/// SHA-256 of a JSON value's canonical serialization (object keys sorted).
pub fn json_hash(value: &serde_json::Value) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

pub fn canonical_json(value: &serde_json::Value) -> String {
    serde_json::to_string(&sorted(value)).expect("json value serializes")
}

fn sorted(value: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), sorted(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn to_bytes<F: Float>(store: &ParamStore<F>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (id, name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            decay: store.decays(id),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: meta.kind.clone(),
        dtype: F::DTYPE.to_string(),
        config_hash: json_hash(&meta.config),
        config: meta.config.clone(),
        rng: meta.rng.clone(),
        meta: meta.meta.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let width = std::mem::size_of::<F>();
    let mut out = Vec::with_capacity(20 + manifest_bytes.len() + offset * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            match width {
                4 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn save<F: Float>(path: &Path, store: &ParamStore<F>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(store, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn from_bytes<F: Float>(bytes: &[u8]) -> Result<(Manifest, ParamStore<F>)> {
    let mut cur = bytes;
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    cur.read_exact(&mut b4).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    cur.read_exact(&mut b8).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let mlen = u64::from_le_bytes(b8) as usize;
    if cur.len() < mlen {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&cur[..mlen])?;
    let data = &cur[mlen..];
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != total * width {
        return Err(Error::Checkpoint(format!(
            "data section has {} bytes, manifest needs {}",
            data.len(),
            total * width
        )));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = &data[entry.offset * width..(entry.offset + n) * width];
        let values = raw
            .chunks_exact(width)
            .map(|c| match width {
                4 => F::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => F::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), values)?, entry.decay)?;
    }
    Ok((manifest, store))
}

pub fn load<F: Float>(path: &Path) -> Result<(Manifest, ParamStore<F>)> {
    from_bytes(&fs::read(path)?)
}
