//! Self-describing checkpoint files.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header, then every tensor as little-endian f32 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::msdnet::{Network, NetworkConfig};
use crate::tensor::{Module, Tensor};

const MAGIC: &[u8; 8] = b"ANYTMCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetworkConfig,
    pub normalization: Normalization,
    pub batchnorm_eps: f32,
    pub batchnorm_momentum: f32,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (epoch, accuracy, effective config, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// A network together with the input normalization it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub normalization: Normalization,
    pub metadata: serde_json::Value,
}

pub fn encode(net: &Network, norm: &Normalization, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    net.visit_state(&mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        config: net.config().clone(),
        normalization: *norm,
        batchnorm_eps: crate::tensor::layers::BN_EPSILON,
        batchnorm_momentum: crate::tensor::layers::BN_MOMENTUM,
        tensors,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Encoding(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses only the header; cheap way to inspect a checkpoint.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, usize), String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or("header length exceeds file size")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| format!("bad header: {e}"))?;
    Ok((header, end))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let (header, data_start) = decode_header(bytes)?;
    let data = &bytes[data_start..];
    let mut net = Network::build(&header.config, 0).map_err(|e| e.to_string())?;
    let expected = net.state_layout();
    if expected.len() != header.tensors.len() {
        return Err(format!(
            "{} tensors stored, architecture has {}",
            header.tensors.len(),
            expected.len()
        ));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(format!(
                "tensor {} {:?} does not match architecture tensor {name} {shape:?}",
                entry.name, entry.shape
            ));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let raw = start
            .checked_add(4 * n)
            .and_then(|end| data.get(start..end))
            .ok_or_else(|| format!("tensor {name} runs past end of file"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        loaded.push(Tensor::new(shape.clone(), values).map_err(|e| e.to_string())?);
    }
    let mut it = loaded.into_iter();
    net.visit_state_mut(&mut |_, t| *t = it.next().expect("counted above"));
    Ok(Checkpoint {
        network: net,
        normalization: header.normalization,
        metadata: header.metadata,
    })
}

/// Writes atomically (temp file + rename).
pub fn save(path: &Path, net: &Network, norm: &Normalization, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode(net, norm, metadata)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::corrupt(path, reason))
}
