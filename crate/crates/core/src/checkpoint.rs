//! Model checkpoints: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! `<stem>.json` holds the model configuration and, for every tensor, its
//! name, shape and offset (in floats) into `<stem>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub in_features: usize,
    pub num_classes: usize,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (the manifest) and the blob beside it.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        in_features: model.in_features(),
        num_classes: model.num_classes(),
        blob: blob
            .file_name()
            .expect("manifest path has a file name")
            .to_string_lossy()
            .into_owned(),
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(path, json)?;
    fs::write(blob, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let load_err = |p: &Path, reason: String| Error::Load {
        path: p.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| load_err(path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| load_err(&blob, e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(load_err(&blob, format!("length {} is not a multiple of 8 bytes", bytes.len())));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut model = Model::new(manifest.model.clone(), manifest.in_features, manifest.num_classes)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Validation(format!(
            "checkpoint lists {} tensors, the configured model has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), (entry, target)) in expected
        .iter()
        .zip(manifest.tensors.iter().zip(model.params.tensors_mut()))
    {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Validation(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + target.numel();
        let src = floats.get(entry.offset..end).ok_or_else(|| {
            Error::Validation(format!(
                "tensor {name} needs floats {}..{end}, blob holds {}",
                entry.offset,
                floats.len()
            ))
        })?;
        target.data_mut().copy_from_slice(src);
    }
    Ok(model)
}
