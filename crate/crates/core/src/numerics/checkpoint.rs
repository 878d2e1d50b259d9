//! Single-file parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PEMVCKPT"              8-byte magic
//! u32                      format version
//! u64                      manifest length in bytes
//! [u8; manifest length]    UTF-8 JSON manifest
//! payload                  each parameter's elements in manifest order,
//!                          packed at the manifest precision (f32 or f64);
//!                          then, when `adam` is present, the first and
//!                          second moments of every parameter as f64
//! ```
//!
//! The manifest lists `name`, `shape` and element `offset` of every
//! parameter plus free-form `metadata` (model config, its hash, the
//! normalization statistics used during training).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PEMVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    precision: String,
    params: Vec<ParamEntry>,
    metadata: serde_json::Value,
    adam: Option<AdamHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub metadata: serde_json::Value,
    pub adam: Option<AdamState>,
}

pub fn write_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut offset = 0;
    let params = (0..ckpt.params.len())
        .map(|i| {
            let v = ckpt.params.value(i);
            let entry = ParamEntry {
                name: ckpt.params.name(i).to_string(),
                shape: v.shape().to_vec(),
                offset,
            };
            offset += v.len();
            entry
        })
        .collect();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        precision: T::PRECISION.to_string(),
        params,
        metadata: ckpt.metadata.clone(),
        adam: ckpt.adam.as_ref().map(|a| AdamHeader {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + offset * T::BYTES);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for i in 0..ckpt.params.len() {
        for &x in ckpt.params.value(i).data() {
            x.to_le_bytes_vec(&mut bytes);
        }
    }
    if let Some(adam) = &ckpt.adam {
        for buf in adam.m.iter().chain(&adam.v) {
            for x in buf {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_floats(bytes: &[u8], precision: &str, count: usize, path: &Path) -> Result<Vec<f64>> {
    let width = match precision {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(path, format!("unknown precision {other}"))),
    };
    if bytes.len() < count * width {
        return Err(Error::format(path, "truncated payload"));
    }
    Ok(bytes[..count * width]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_le_slice(c) as f64
            } else {
                f64::from_le_slice(c)
            }
        })
        .collect())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let total: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    let payload = &bytes[20 + len..];
    let flat = read_floats(payload, &manifest.precision, total, path)?;
    let mut params = ParamStore::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let slice = flat
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::format(path, format!("bad offset for {}", entry.name)))?;
        params.push(entry.name.clone(), Tensor::from_f64(&entry.shape, slice)?);
    }
    let width = if manifest.precision == "f32" { 4 } else { 8 };
    let adam = match manifest.adam {
        Some(h) => {
            let moments = read_floats(&payload[total * width..], "f64", 2 * total, path)?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            let mut at = 0;
            for entry in &manifest.params {
                let n: usize = entry.shape.iter().product();
                m.push(moments[at..at + n].to_vec());
                v.push(moments[total + at..total + at + n].to_vec());
                at += n;
            }
            Some(AdamState {
                lr: h.lr,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
                step: h.step,
                m,
                v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        params,
        metadata: manifest.metadata,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 1e-7, 7.0, -0.0]).unwrap());
        s.push("b", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        s
    }

    #[test]
    fn roundtrip_with_adam() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = store();
        let mut adam = AdamState::new(&params, 1e-3);
        adam.m[0][1] = 0.25;
        adam.v[1][2] = 4.0;
        adam.step = 3;
        let ckpt = Checkpoint {
            params,
            metadata: serde_json::json!({"hash": "abc"}),
            adam: Some(adam),
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f32> = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(read_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ckpt = Checkpoint {
            params: store(),
            metadata: serde_json::Value::Null,
            adam: None,
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint::<f32>(&path).is_err());
    }
}
