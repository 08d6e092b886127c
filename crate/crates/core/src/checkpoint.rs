//! Model checkpoints: a flat binary of little-endian 32-bit floats plus a
//! JSON manifest of (name, shape, byte offset) entries and a config
//! side-file. Files round-trip bit-exactly: load(save(m)) followed by
//! another save reproduces the first file byte for byte.

use crate::backbone::{BackboneConfig, Model, NamedTensor};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const WEIGHTS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    kind: String, // "param" | "buffer"
}

/// Write a model checkpoint into `dir` (created if needed).
pub fn save(dir: impl AsRef<Path>, model: &Model) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (kind, tensor) in named(model) {
        entries.push(ManifestEntry {
            name: tensor.name.clone(),
            shape: tensor.tensor.shape().to_vec(),
            offset: blob.len(),
            kind: kind.to_string(),
        });
        for &v in tensor.tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    let manifest =
        serde_json::to_string_pretty(&entries).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let config =
        serde_json::to_string_pretty(&model.config).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(dir.join(CONFIG_FILE), config)?;
    Ok(())
}

fn named(model: &Model) -> Vec<(&'static str, &NamedTensor)> {
    model
        .params()
        .iter()
        .map(|t| ("param", t))
        .chain(model.buffers().iter().map(|t| ("buffer", t)))
        .collect()
}

/// Load a checkpoint written by [`save`].
pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config: BackboneConfig = serde_json::from_str(
        &std::fs::read_to_string(dir.join(CONFIG_FILE))?,
    )
    .map_err(|e| Error::Parse {
        path: dir.join(CONFIG_FILE).display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(
        &std::fs::read_to_string(dir.join(MANIFEST_FILE))?,
    )
    .map_err(|e| Error::Parse {
        path: dir.join(MANIFEST_FILE).display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;

    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 4;
        if end > blob.len() {
            return Err(Error::validation(format!(
                "checkpoint entry {} overruns the weights file",
                e.name
            )));
        }
        let data: Vec<f64> = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let tensor = NamedTensor {
            name: e.name,
            tensor: Tensor::new(e.shape, data)?,
        };
        match e.kind.as_str() {
            "param" => params.push(tensor),
            "buffer" => buffers.push(tensor),
            other => {
                return Err(Error::validation(format!(
                    "unknown checkpoint entry kind {other}"
                )))
            }
        }
    }
    Model::from_parts(config, params, buffers)
}
