//! Checkpoints: a JSON manifest next to a binary tensor blob. The manifest
//! records the config snapshot, a per-tensor index, and a content hash of the
//! blob, so loads fail loudly on truncation or bit rot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{CarModel, CarModelConfig};
use crate::policy::{PolicyConfig, SchedulerPolicy};
use crate::tensor::{read_tensor, write_tensor, Param};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint role is {found}, expected {expected}")]
    Role { expected: String, found: String },
    #[error("blob hash mismatch: manifest {expected}, file {found}")]
    Hash { expected: String, found: String },
    #[error("bad checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    role: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn save(stem: &Path, role: &str, config: serde_json::Value, params: &[&Param]) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for p in params {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone(), offset: blob.len() });
        write_tensor(&mut blob, &p.shape, &p.data);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        role: role.to_string(),
        config,
        tensors,
        blob_sha256: sha256_hex(&blob),
    };
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob_path(stem), &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(manifest_path(stem), json)?;
    Ok(())
}

fn load(stem: &Path, expected_role: &str) -> Result<(Manifest, Vec<u8>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(stem))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    if manifest.role != expected_role {
        return Err(CheckpointError::Role {
            expected: expected_role.to_string(),
            found: manifest.role,
        });
    }
    let blob = fs::read(blob_path(stem))?;
    let found = sha256_hex(&blob);
    if found != manifest.blob_sha256 {
        return Err(CheckpointError::Hash { expected: manifest.blob_sha256, found });
    }
    Ok((manifest, blob))
}

fn fill_params(manifest: &Manifest, blob: &[u8], params: &mut [&mut Param]) -> Result<()> {
    if manifest.tensors.len() != params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} tensors in manifest, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (entry, p) in manifest.tensors.iter().zip(params.iter_mut()) {
        if entry.name != p.name {
            return Err(CheckpointError::Corrupt(format!(
                "tensor order mismatch: {} vs {}",
                entry.name, p.name
            )));
        }
        let slice = blob
            .get(entry.offset..)
            .ok_or_else(|| CheckpointError::Corrupt(format!("offset {} out of blob", entry.offset)))?;
        let (shape, data, _) = read_tensor(slice)
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} truncated", entry.name)))?;
        if shape != p.shape || shape != entry.shape {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {} shape {:?} does not match model {:?}",
                entry.name, shape, p.shape
            )));
        }
        p.data = data;
    }
    Ok(())
}

pub fn save_car(model: &CarModel, stem: &Path) -> Result<()> {
    save(stem, "base", serde_json::to_value(&model.cfg)?, &model.params())
}

pub fn load_car(stem: &Path) -> Result<CarModel> {
    let (manifest, blob) = load(stem, "base")?;
    let cfg: CarModelConfig = serde_json::from_value(manifest.config.clone())?;
    let mut model = CarModel::new(cfg)?;
    fill_params(&manifest, &blob, &mut model.params_mut())?;
    Ok(model)
}

pub fn save_policy(policy: &SchedulerPolicy, stem: &Path) -> Result<()> {
    save(stem, "policy", serde_json::to_value(&policy.cfg)?, &policy.params())
}

pub fn load_policy(stem: &Path) -> Result<SchedulerPolicy> {
    let (manifest, blob) = load(stem, "policy")?;
    let cfg: PolicyConfig = serde_json::from_value(manifest.config.clone())?;
    let mut policy = SchedulerPolicy::new(cfg)?;
    fill_params(&manifest, &blob, &mut policy.params_mut())?;
    Ok(policy)
}
