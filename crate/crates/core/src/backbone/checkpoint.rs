//! Named-parameter archive.
//!
//! Layout: the 8-byte magic `SVAECKPT`, a little-endian `u64` header length,
//! a UTF-8 JSON [`CheckpointHeader`], then every parameter's values as
//! little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    /// Free-form model description (the model config).
    pub model: serde_json::Value,
    pub params: Vec<CheckpointEntry>,
}

pub fn write_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    config_hash: &str,
    epoch: usize,
    model: serde_json::Value,
) -> Result<()> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        params.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        epoch,
        model,
        params,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for p in store.iter() {
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Tensors in file order, keyed by parameter name.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, NamedTensors)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "unsupported version {}",
            header.format_version
        )));
    }
    let payload = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 4;
        let chunk = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| bad(&format!("truncated payload for {}", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trips_names_shapes_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add(
            "a.weight",
            Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -8.25]).unwrap(),
        );
        store.add("a.bias", Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        write_checkpoint(&path, &store, "abc123", 7, serde_json::json!({"d_p": 8})).unwrap();
        let (header, tensors) = read_checkpoint(&path).unwrap();
        assert_eq!(header.config_hash, "abc123");
        assert_eq!(header.epoch, 7);
        assert_eq!(header.model["d_p"], 8);
        assert_eq!(tensors.len(), 2);
        for ((name, t), p) in tensors.iter().zip(store.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(t, &p.value);
        }
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
