//! Binary model checkpoints.
//!
//! Layout: the magic `VNCK`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then a blob of
//! little-endian `f64` values. Manifest offsets are relative to the start
//! of the blob.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::vnet::{Model, VNetConfig};

pub const MAGIC: [u8; 4] = *b"VNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint manifest: {0}")]
    ManifestCorrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: VNetConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &Model) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = model
        .parameters()
        .iter()
        .map(|p| {
            let length = 8 * p.value.numel() as u64;
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    let manifest = Manifest {
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u64::<LittleEndian>(json.len() as u64).unwrap();
    out.extend_from_slice(&json);
    for p in model.parameters() {
        for &v in p.value.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn load(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let corrupt = |m: String| CheckpointError::ManifestCorrupt(m);
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(
            bytes[..bytes.len().min(4)].to_vec(),
        ));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated header".into()))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt("truncated header".into()))?;
    let rest = &bytes[16..];
    if len > rest.len() as u64 {
        return Err(corrupt(format!(
            "manifest length {len} exceeds {} remaining bytes",
            rest.len()
        )));
    }
    let (json, blob) = rest.split_at(len as usize);
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest JSON: {e}")))?;

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(corrupt(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| corrupt(format!("{}: shape overflows", e.name)))?;
        if numel.checked_mul(8) != Some(e.length) {
            return Err(corrupt(format!(
                "{}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| corrupt(format!("{}: data extends past end of file", e.name)))?;
        spans.push((e.offset, end, &e.name));
        let mut r = &blob[e.offset as usize..end as usize];
        let mut data = vec![0.0; numel as usize];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|err| corrupt(format!("{}: {err}", e.name)))?;
        tensors.push((
            e.name.clone(),
            Tensor::new(e.shape.clone(), data).expect("length checked"),
        ));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(corrupt(format!(
                "tensors {} and {} overlap",
                w[0].2, w[1].2
            )));
        }
    }
    let mut names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(corrupt(format!("duplicate tensor {}", w[0])));
    }
    Model::from_parameters(manifest.config, tensors).map_err(|e| corrupt(e.to_string()))
}

/// The raw JSON manifest of a checkpoint.
pub fn manifest_json(bytes: &[u8]) -> Result<String, CheckpointError> {
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(
            bytes[..bytes.len().min(4)].to_vec(),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let mut s = String::new();
    let end = 16u64.saturating_add(len).min(bytes.len() as u64) as usize;
    (&bytes[16..end])
        .read_to_string(&mut s)
        .map_err(|e| CheckpointError::ManifestCorrupt(e.to_string()))?;
    Ok(s)
}
