//! Checkpoints: a raw little-endian parameter blob (`<stem>.bin`) next to a
//! JSON metadata record (`<stem>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, Classifier, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QWPARAM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture_id: String,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub epoch: usize,
    /// Metric the checkpoint was selected or recorded with (held-out accuracy
    /// for victims, validation macro-F1 for anchors, validation accuracy for students).
    pub validation_metric: f64,
    pub validation_metric_name: String,
    pub config_hash: String,
    pub param_count: usize,
    pub params_sha256: String,
}

/// SHA-256 over the little-endian bytes of the parameter vector.
pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`. The digest and counts in `meta` are
/// overwritten from `net`.
pub fn save_checkpoint(stem: &Path, net: &Network, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let params = net.params();
    meta.architecture = net.architecture().clone();
    meta.architecture_id = net.architecture_id();
    meta.num_classes = net.num_classes();
    meta.param_count = params.len();
    meta.params_sha256 = params_digest(params);

    let mut blob = Vec::with_capacity(16 + params.len() * 8);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        blob.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(meta)
}

pub fn load_checkpoint(stem: &Path) -> Result<(Network, CheckpointMeta)> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() < 16 || &blob[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a parameter blob", bin.display())));
    }
    let count = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
    if blob.len() != 16 + count * 8 || count != meta.param_count {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes for {count} parameters (metadata says {})",
            bin.display(),
            blob.len(),
            meta.param_count
        )));
    }
    let params: Vec<f64> = blob[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if params_digest(&params) != meta.params_sha256 {
        return Err(Error::Checkpoint(format!("digest mismatch for {}", bin.display())));
    }
    let net = Network::from_params(meta.architecture.clone(), params)?;
    Ok((net, meta))
}

impl CheckpointMeta {
    /// Metadata skeleton; architecture fields and the digest are filled in by [`save_checkpoint`].
    pub fn new(
        net: &Network,
        epoch: usize,
        metric_name: &str,
        metric: f64,
        config_hash: &str,
    ) -> Self {
        Self {
            architecture_id: net.architecture_id(),
            architecture: net.architecture().clone(),
            num_classes: net.num_classes(),
            epoch,
            validation_metric: metric,
            validation_metric_name: metric_name.to_string(),
            config_hash: config_hash.to_string(),
            param_count: net.params().len(),
            params_sha256: params_digest(net.params()),
        }
    }
}
