//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header (config, training metadata, tensor table) and the
//! raw little-endian `f32` values in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, Network, ParamGroup};
use crate::training::TrainPhase;
use crate::Error;

const MAGIC: &[u8; 8] = b"SUTCKPT1";

/// Training history carried along with the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Phases completed so far, in order.
    pub phases: Vec<PhaseRecord>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: TrainPhase,
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(net: &mut Network<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    net.visit(&mut |group, _, r| {
        let values = r.values();
        tensors.push(TensorEntry { name: r.name.clone(), group, len: values.len() });
        data.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    });
    let header = Header { config: net.config.clone(), meta: meta.clone(), tensors };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Network<f32>, CheckpointMeta), Error> {
    let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
    let mut net = Network::<f32>::new(&header.config, 0).map_err(|e| fail(e.to_string()))?;
    let mut data = &body[hlen..];
    let mut entries = header.tensors.iter();
    let mut err = None;
    net.visit(&mut |group, _, mut r| {
        if err.is_some() {
            return;
        }
        let Some(entry) = entries.next() else {
            err = Some("tensor table is shorter than the network".to_string());
            return;
        };
        let want = r.values().len();
        if entry.name != r.name || entry.group != group || entry.len != want {
            err = Some(format!("tensor {} does not match network layout ({})", entry.name, r.name));
            return;
        }
        if data.len() < want * 4 {
            err = Some(format!("truncated data in {}", entry.name));
            return;
        }
        let (chunk, rest) = data.split_at(want * 4);
        *r.values_mut() = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        data = rest;
    });
    if let Some(reason) = err {
        return Err(fail(reason));
    }
    if entries.next().is_some() || !data.is_empty() {
        return Err(fail("trailing tensors or data".into()));
    }
    Ok((net, header.meta))
}

pub fn save_checkpoint(path: &Path, net: &mut Network<f32>, meta: &CheckpointMeta) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(net, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointMeta), Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
