//! Binary checkpoints.
//!
//! Layout: one ASCII line `CNSCKPT 1 <header bytes>\n`, a JSON manifest of
//! that many bytes, then every tensor as little-endian `f32` records in
//! manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::LayerGraph;
use super::network::Network;
use crate::consensus::HeadConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "CNSCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the payload.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub graph: LayerGraph,
    pub head_config: HeadConfig,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes `net` to bytes.
pub fn to_bytes(net: &Network<f32>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for e in net.store().entries() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset,
            trainable: e.trainable,
        });
        offset += e.value.numel();
    }
    let manifest = Manifest {
        graph: net.graph().clone(),
        head_config: net.head_config().clone(),
        seed: net.seed(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = format!("{MAGIC} {VERSION} {}\n", header.len()).into_bytes();
    out.extend_from_slice(&header);
    out.reserve(offset * 4);
    for e in net.store().entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds a network from bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header line is not ASCII"))?;
    let mut parts = line.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(corrupt("bad magic"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("bad version"))?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("bad header length"))?;
    let start = nl + 1;
    let header = bytes
        .get(start..start + len)
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(header)?;
    let payload = &bytes[start + len..];

    let mut net = Network::<f32>::from_graph(manifest.graph, manifest.head_config, manifest.seed)?;
    if net.store().len() != manifest.tensors.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, graph has {}",
            manifest.tensors.len(),
            net.store().len()
        )));
    }
    let mut expected_offset = 0;
    for rec in &manifest.tensors {
        let id = net
            .store()
            .id_of(&rec.name)
            .ok_or_else(|| corrupt(format!("unknown tensor {}", rec.name)))?;
        let want = net.store().get(id).shape().to_vec();
        if want != rec.shape {
            return Err(corrupt(format!(
                "tensor {} has shape {:?}, expected {:?}",
                rec.name, rec.shape, want
            )));
        }
        if rec.offset != expected_offset {
            return Err(corrupt(format!(
                "tensor {} at offset {}, expected {}",
                rec.name, rec.offset, expected_offset
            )));
        }
        let n: usize = rec.shape.iter().product();
        let raw = payload
            .get(rec.offset * 4..(rec.offset + n) * 4)
            .ok_or_else(|| corrupt(format!("payload truncated in {}", rec.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        net.store_mut().set(id, Tensor::new(rec.shape.clone(), data)?);
        expected_offset += n;
    }
    if payload.len() != expected_offset * 4 {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(net)
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(net)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
