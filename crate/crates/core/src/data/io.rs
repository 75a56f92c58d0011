//! Raw little-endian float64 arrays with a JSON sidecar `<stem>.meta.json`
//! carrying dtype, shape and order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{format_err, io_err, DataError, Result};
use crate::wave::{ReceiverGeometry, Traces, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Volume,
    Traces,
    Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Always "C": the last axis varies fastest.
    pub order: String,
    pub kind: ArrayKind,
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn encode(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Writes payload and sidecar; returns the payload SHA-256.
pub fn write_array(path: &Path, shape: &[usize], kind: ArrayKind, values: &[f64]) -> Result<String> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(DataError::Shape(format!("shape {shape:?} does not hold {} values", values.len())));
    }
    let bytes = encode(values);
    write_atomic(path, &bytes)?;
    let meta = ArrayMeta { dtype: "f64".into(), shape: shape.to_vec(), order: "C".into(), kind };
    let mp = meta_path(path);
    let json = serde_json::to_vec_pretty(&meta).map_err(|source| DataError::Json { path: mp.clone(), source })?;
    write_atomic(&mp, &json)?;
    Ok(sha256_hex(&bytes))
}

/// Reads payload and sidecar, validating dtype, order and size.
pub fn read_array(path: &Path) -> Result<(ArrayMeta, Vec<f64>)> {
    let mp = meta_path(path);
    let text = fs::read(&mp).map_err(io_err(&mp))?;
    let meta: ArrayMeta = serde_json::from_slice(&text).map_err(|source| DataError::Json { path: mp.clone(), source })?;
    if meta.dtype != "f64" || meta.order != "C" {
        return Err(format_err(&mp, format!("unsupported dtype/order {}/{}", meta.dtype, meta.order)));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(format_err(path, format!("payload has {} bytes, shape {:?} needs {}", bytes.len(), meta.shape, 8 * n)));
    }
    let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((meta, values))
}

pub fn verify_checksum(path: &Path, expected: &str) -> Result<()> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(DataError::Checksum { path: path.to_path_buf(), expected: expected.into(), actual });
    }
    Ok(())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<String> {
    write_array(path, &v.dims(), ArrayKind::Volume, v.values())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (meta, values) = read_array(path)?;
    if meta.kind != ArrayKind::Volume || meta.shape.len() != 3 {
        return Err(format_err(path, format!("expected a 3-axis volume, got {:?} {:?}", meta.kind, meta.shape)));
    }
    Ok(Volume::from_vec([meta.shape[0], meta.shape[1], meta.shape[2]], values)?)
}

pub fn write_traces(path: &Path, t: &Traces) -> Result<String> {
    write_array(path, &[t.n_receivers(), t.nt()], ArrayKind::Traces, t.values())
}

pub fn read_traces(path: &Path, geometry: &ReceiverGeometry) -> Result<Traces> {
    let (meta, values) = read_array(path)?;
    if meta.kind != ArrayKind::Traces || meta.shape.len() != 2 || meta.shape[0] != geometry.n_active() {
        return Err(format_err(
            path,
            format!("expected traces with {} receivers, got {:?} {:?}", geometry.n_active(), meta.kind, meta.shape),
        ));
    }
    Ok(Traces::from_vec(geometry, meta.shape[1], values)?)
}
