//! Checkpoints: a JSON header (architecture, parameter shapes, seed, schedule
//! fingerprint) next to a raw little-endian f32 parameter blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Architecture, Network};
use super::NnetError;

const FORMAT: &str = "aisdet-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: Architecture,
    pub param_lengths: Vec<usize>,
    pub seed: u64,
    pub schedule_fingerprint: String,
    /// Free-form metadata owned by the caller (e.g. detector config).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn blob_path_for(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub fn encode_params(net: &Network<f32>) -> Vec<u8> {
    let mut blob = Vec::with_capacity(net.param_count() * 4);
    for p in net.params() {
        for v in p {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob
}

pub fn save_checkpoint(
    net: &Network<f32>,
    schedule_fingerprint: &str,
    meta: serde_json::Value,
    path: &Path,
) -> Result<(), NnetError> {
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        architecture: net.architecture(),
        param_lengths: net.params().iter().map(Vec::len).collect(),
        seed: net.seed(),
        schedule_fingerprint: schedule_fingerprint.to_string(),
        meta,
    };
    fs::write(path, serde_json::to_vec_pretty(&header)?)?;
    fs::write(blob_path_for(path), encode_params(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointHeader), NnetError> {
    let header: CheckpointHeader = serde_json::from_slice(&fs::read(path)?)?;
    if header.format != FORMAT {
        return Err(NnetError::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let mut net = Network::<f32>::from_architecture(&header.architecture, header.seed)?;
    let lengths: Vec<usize> = net.params().iter().map(Vec::len).collect();
    if lengths != header.param_lengths {
        return Err(NnetError::Checkpoint("parameter shapes disagree with the architecture".into()));
    }
    let blob = fs::read(blob_path_for(path))?;
    if blob.len() != lengths.iter().sum::<usize>() * 4 {
        return Err(NnetError::Checkpoint(format!("blob has {} bytes, expected {}", blob.len(), lengths.iter().sum::<usize>() * 4)));
    }
    let mut values = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v = values.next().expect("length checked above");
        }
    }
    Ok((net, header))
}
