//! Network checkpoints: a directory holding `manifest.json` (format version,
//! network configuration, tensor table, checksum, optimizer state) and
//! `tensors.bin` (little-endian `f32`, parameters then Adam moments).

use std::path::Path;

use relight_autodiff::{decode_f32_le, encode_f32_le, AdamConfig, AdamState, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_json, write_json};
use crate::prnet::{PrNetConfig, PrNetParams};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";
const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PrNetConfig,
    pub params: PrNetParams,
    /// Optimizer state; absent for inference-only checkpoints.
    pub adam: Option<AdamState<f32>>,
    /// Training steps completed.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamRecord {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    network: PrNetConfig,
    step: u64,
    adam: Option<AdamRecord>,
    tensors: Vec<TensorEntry>,
    blob: String,
    blob_bytes: usize,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut names: Vec<String> = ckpt.params.names().to_vec();
    let mut tensors: Vec<&Tensor<f32>> = ckpt.params.tensors().iter().collect();
    if let Some(adam) = &ckpt.adam {
        for (prefix, moments) in [(MOMENT_M, &adam.m), (MOMENT_V, &adam.v)] {
            names.extend(ckpt.params.names().iter().map(|n| format!("{prefix}{n}")));
            tensors.extend(moments.iter());
        }
    }
    let blob = encode_f32_le(&tensors);
    let mut offset = 0;
    let entries = names
        .into_iter()
        .zip(&tensors)
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 4;
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        network: ckpt.config.clone(),
        step: ckpt.step,
        adam: ckpt.adam.as_ref().map(|a| AdamRecord {
            lr: a.config.lr,
            beta1: a.config.beta1,
            beta2: a.config.beta2,
            eps: a.config.eps,
            step: a.step,
        }),
        tensors: entries,
        blob: BLOB.into(),
        blob_bytes: blob.len(),
        sha256: hex(&Sha256::digest(&blob)),
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(Error::io(&blob_path))?;
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads and validates a checkpoint. With `expected`, a differing network
/// configuration is rejected.
pub fn load_checkpoint(dir: &Path, expected: Option<&PrNetConfig>) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let err = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
    let fail = |m: String| Err(err(m));
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return fail(format!("unsupported format version {}", manifest.format_version));
    }
    if let Some(cfg) = expected {
        if cfg != &manifest.network {
            return fail("network configuration differs from the requested one".into());
        }
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(Error::io(&blob_path))?;
    if blob.len() != manifest.blob_bytes {
        return fail(format!("blob has {} bytes, manifest records {}", blob.len(), manifest.blob_bytes));
    }
    if hex(&Sha256::digest(&blob)) != manifest.sha256 {
        return fail("checksum mismatch".into());
    }
    let mut offset = 0;
    for e in &manifest.tensors {
        if e.offset != offset {
            return fail(format!("tensor {} at offset {}, expected {offset}", e.name, e.offset));
        }
        offset += e.shape.iter().product::<usize>() * 4;
    }
    let shapes: Vec<Vec<usize>> = manifest.tensors.iter().map(|e| e.shape.clone()).collect();
    let mut tensors = decode_f32_le::<f32>(&blob, &shapes).map_err(|e| err(e.to_string()))?;
    let n = if manifest.adam.is_some() { manifest.tensors.len() / 3 } else { manifest.tensors.len() };
    let expected_count = if manifest.adam.is_some() { 3 * n } else { n };
    if expected_count != manifest.tensors.len() {
        return fail(format!("{} tensors cannot hold parameters plus moments", manifest.tensors.len()));
    }
    let names: Vec<String> = manifest.tensors[..n].iter().map(|e| e.name.clone()).collect();
    let rest = tensors.split_off(n);
    let params = PrNetParams::new(&manifest.network, names.clone(), tensors)
        .map_err(|e| err(format!("parameters disagree with the stored configuration: {e}")))?;
    let adam = match manifest.adam {
        None => None,
        Some(rec) => {
            for (i, e) in manifest.tensors[n..].iter().enumerate() {
                let (prefix, base) = if i < n { (MOMENT_M, i) } else { (MOMENT_V, i - n) };
                if e.name != format!("{prefix}{}", names[base]) || e.shape != manifest.tensors[base].shape {
                    return fail(format!("unexpected optimizer tensor {}", e.name));
                }
            }
            let mut m = rest;
            let v = m.split_off(n);
            Some(AdamState {
                config: AdamConfig {
                    lr: rec.lr,
                    beta1: rec.beta1,
                    beta2: rec.beta2,
                    eps: rec.eps,
                },
                step: rec.step,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        config: manifest.network,
        params,
        adam,
        step: manifest.step,
    })
}
