//! Checkpoint container: one file holding a JSON manifest followed by raw
//! little-endian f32 arrays, one per named parameter.
//!
//! Layout:
//!   bytes 0..4    magic "MFCK"
//!   bytes 4..12   u64 LE manifest length N
//!   bytes 12..12+N  manifest.json (shapes, names, offsets, dtype, byte order)
//!   remainder     concatenated raw f32 LE arrays in manifest order

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MFCK";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// element offset into the blob section
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    byte_order: String,
    entries: Vec<Entry>,
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, tensor, trainable) in store.iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.numel(),
            trainable,
        });
        offset += tensor.numel();
    }
    let manifest = Manifest {
        format_version: 1,
        dtype: "f32".into(),
        byte_order: "little".into(),
        entries,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::integrity(format!("manifest encode: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(offset * 4);
    for (_, tensor, _) in store.iter() {
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

/// Load into a fresh store. When `expect` is given, names and shapes must
/// match it exactly (the model the checkpoint is being restored into).
pub fn load(path: &Path, expect: Option<&ParamStore>) -> Result<ParamStore> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::integrity(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(io)?;
    let json_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::integrity(format!("bad checkpoint manifest: {e}")))?;
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::integrity(format!(
            "unsupported checkpoint dtype/byte-order {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob).map_err(io)?;
    let total: usize = manifest.entries.iter().map(|e| e.len).sum();
    if blob.len() != total * 4 {
        return Err(Error::integrity(format!(
            "checkpoint blob holds {} bytes, manifest implies {}",
            blob.len(),
            total * 4
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.len {
            return Err(Error::integrity(format!(
                "entry '{}': shape {:?} vs len {}",
                e.name, e.shape, e.len
            )));
        }
        let start = e.offset * 4;
        let data: Vec<f32> = blob[start..start + e.len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?, e.trainable);
    }
    if let Some(expect) = expect {
        for (name, tensor, _) in expect.iter() {
            let got = store.get(name).map_err(|_| {
                Error::integrity(format!("checkpoint is missing parameter '{name}'"))
            })?;
            if got.shape() != tensor.shape() {
                return Err(Error::integrity(format!(
                    "checkpoint parameter '{name}' has shape {:?}, model expects {:?}",
                    got.shape(),
                    tensor.shape()
                )));
            }
        }
        if store.len() != expect.len() {
            return Err(Error::integrity(format!(
                "checkpoint holds {} parameters, model expects {}",
                store.len(),
                expect.len()
            )));
        }
    }
    Ok(store)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
