//! Parameter checkpoints: a JSON manifest plus one little-endian `f64` blob.
//!
//! ```text
//! <dir>/manifest.json   format, strategy, model config, hashes, parameter table
//! <dir>/params.bin      concatenated parameter values in table order
//! ```
//!
//! Only the parameters a strategy trains are written. The manifest keeps a
//! hash of every backbone parameter that was *not* written, so a checkpoint
//! can only be loaded onto the backbone it was trained against.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::strategy::FinetuneStrategy;

const FORMAT: u32 = 1;
const BLOB: &str = "params.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub strategy: FinetuneStrategy,
    pub model: ModelConfig,
    pub config_hash: String,
    pub backbone_hash: String,
    pub params: Vec<ParamEntry>,
}

/// Hash of the model configuration and the attached module kind.
pub fn config_hash(model: &Backbone) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.cfg).expect("config serializes"));
    h.update(model.attachment.kind_name().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the parameters selected by `mask`.
pub fn save_checkpoint(model: &Backbone, strategy: &FinetuneStrategy, mask: &[bool], dir: &Path) -> Result<Manifest> {
    if mask.len() != model.store.len() {
        return Err(Error::dim("save_checkpoint", &[mask.len()], &[model.store.len()]));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (id, p) in model.store.iter().filter(|(id, _)| mask[id.index()]) {
        let len = p.value.numel();
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
        for v in model.store.value(id).data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        strategy: strategy.clone(),
        model: model.cfg.clone(),
        config_hash: config_hash(model),
        backbone_hash: model.backbone_hash_excluding(mask),
        params,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Compat(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

/// Restores the checkpointed parameters into `model`. Every check runs
/// before anything is written, so a rejected checkpoint leaves the model
/// untouched.
pub fn load_checkpoint(model: &mut Backbone, dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    if manifest.config_hash != config_hash(model) {
        return Err(Error::Compat(format!(
            "checkpoint was written for a {} model with config {:?}; this model carries {}",
            manifest.strategy.kind,
            manifest.model,
            model.attachment.kind_name()
        )));
    }
    let blob_path: PathBuf = dir.join(BLOB);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.len).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Compat(format!(
            "{} holds {} bytes, manifest describes {}",
            blob_path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    let mut restored = Vec::with_capacity(manifest.params.len());
    let mut covered = vec![false; model.store.len()];
    let mut cursor = 0;
    for entry in &manifest.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Compat(format!("model has no parameter {:?}", entry.name)))?;
        let current = model.store.value(id);
        if current.shape() != entry.shape.as_slice()
            || entry.shape.iter().product::<usize>() != entry.len
            || entry.offset != cursor
        {
            return Err(Error::Compat(format!(
                "parameter {:?}: checkpoint shape {:?} at offset {}, model shape {:?}",
                entry.name,
                entry.shape,
                entry.offset,
                current.shape()
            )));
        }
        let data: Vec<f64> = bytes[cursor * 8..(cursor + entry.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        cursor += entry.len;
        covered[id.index()] = true;
        restored.push((id, Tensor::new(&entry.shape, data)?));
    }
    if model.backbone_hash_excluding(&covered) != manifest.backbone_hash {
        return Err(Error::Compat(
            "backbone parameters differ from the ones this checkpoint was trained against".into(),
        ));
    }
    for (id, value) in restored {
        *model.store.value_mut(id) = value;
    }
    Ok(manifest)
}

/// Bytes on disk for a checkpoint directory.
pub fn checkpoint_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for name in [MANIFEST, BLOB] {
        let p = dir.join(name);
        total += fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
    }
    Ok(total)
}
