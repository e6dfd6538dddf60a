use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, DenoiserModel, Tensor, TrainConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::tensor_file::{TensorData, TensorFile};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Contents of `manifest.json` in a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch_hash: String,
    pub architecture: Architecture,
    pub seed: u64,
    /// Hash of the training grid the model was trained against.
    pub schedule: String,
    pub train_config: Option<TrainConfig>,
    pub weights_hash: String,
    /// One ZSTR file per parameter, in registry order.
    pub tensors: Vec<String>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes every parameter as an `f32` ZSTR file plus the manifest.
pub fn save_checkpoint(
    model: &DenoiserModel,
    dir: &Path,
    train_config: Option<&TrainConfig>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, p) in model.param_names().zip(model.params()) {
        let file = format!("{name}.zstr");
        TensorFile::new(p.shape().to_vec(), TensorData::F32(p.data().to_vec()))?
            .write(&dir.join(&file))?;
        tensors.push(file);
    }
    let manifest = CheckpointManifest {
        arch_hash: model.arch_hash(),
        architecture: model.architecture(),
        seed: model.seed(),
        schedule: NoiseSchedule::training_grid().hash(),
        train_config: train_config.cloned(),
        weights_hash: model.weights_hash(),
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a checkpoint, verifying the architecture hash and parameter bits.
pub fn load_checkpoint(dir: &Path) -> Result<(DenoiserModel, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    let template = DenoiserModel::new(manifest.architecture, manifest.seed)?;
    let expected = template.arch_hash();
    if manifest.arch_hash != expected {
        return Err(Error::ArchMismatch {
            expected,
            found: manifest.arch_hash,
        });
    }
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for file in &manifest.tensors {
        let tpath = dir.join(file);
        let tf = TensorFile::read(&tpath).map_err(|e| match e {
            Error::CorruptTensor { reason, .. } => corrupt(&tpath, reason),
            other => other,
        })?;
        let data = match tf.data {
            TensorData::F32(v) => v,
            TensorData::F64(_) => return Err(corrupt(&tpath, "expected f32 payload")),
        };
        params.push(Tensor::new(tf.dims, data).map_err(|e| corrupt(&tpath, e.to_string()))?);
    }
    let model = DenoiserModel::from_params(manifest.architecture, manifest.seed, params)
        .map_err(|e| corrupt(dir, e.to_string()))?;
    if model.weights_hash() != manifest.weights_hash {
        return Err(corrupt(
            dir,
            "parameter bits do not match the manifest hash",
        ));
    }
    Ok((model, manifest))
}

/// Like [`load_checkpoint`] but also requires a specific architecture.
pub fn load_checkpoint_for(dir: &Path, arch: Architecture) -> Result<DenoiserModel> {
    let (model, manifest) = load_checkpoint(dir)?;
    let expected = DenoiserModel::new(arch, 0)?.arch_hash();
    if manifest.arch_hash != expected {
        return Err(Error::ArchMismatch {
            expected,
            found: manifest.arch_hash,
        });
    }
    Ok(model)
}
