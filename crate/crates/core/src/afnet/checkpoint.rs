use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::tensor::io::{decode, encode};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "evfuse-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The JSON half of a checkpoint. `blob` names the binary file next to it,
/// which holds `params` then `running` in listed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub blob: String,
    pub params: Vec<TensorEntry>,
    pub running: Vec<TensorEntry>,
}

fn entries(set: &ParamSet) -> Vec<TensorEntry> {
    set.iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Writes `path` (JSON) and the blob at `path` with extension `bin`.
pub fn save_checkpoint(
    path: &Path,
    config: &impl Serialize,
    seed: u64,
    params: &ParamSet,
    running: &ParamSet,
) -> Result<()> {
    let blob_path = path.with_extension("bin");
    if blob_path == path {
        return Err(Error::Config(format!("checkpoint path {} must not end in .bin", path.display())));
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        seed,
        config: serde_json::to_value(config).map_err(|e| Error::json(path, e))?,
        blob: blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        params: entries(params),
        running: entries(running),
    };
    let tensors: Vec<&Tensor> = params.iter().chain(running.iter()).map(|(_, t)| t).collect();
    write_atomic(&blob_path, &encode(&tensors))?;
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    json.push(b'\n');
    write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamSet, ParamSet)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("unsupported checkpoint format {:?}", manifest.format),
        });
    }
    let blob_path = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let shapes: Vec<Vec<usize>> = manifest
        .params
        .iter()
        .chain(&manifest.running)
        .map(|e| e.shape.clone())
        .collect();
    let mut tensors = decode(&bytes, &shapes, &blob_path)?.into_iter();
    let mut params = ParamSet::new();
    for e in &manifest.params {
        params.insert(e.name.clone(), tensors.next().expect("decoded one tensor per entry"));
    }
    let mut running = ParamSet::new();
    for e in &manifest.running {
        running.insert(e.name.clone(), tensors.next().expect("decoded one tensor per entry"));
    }
    Ok((manifest, params, running))
}
