//! Checkpoints: `manifest.json` describing every tensor plus `params.bin`,
//! a single little-endian `f32` blob.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{EncoderConfig, OptimizerConfig, OptimizerKind};
use crate::engine::Optimizer;
use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::params::ParamStore;
use crate::sampler::SamplerState;

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "plaindet-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub sampler: SamplerState,
    pub step: usize,
    pub encoder: EncoderConfig,
}

impl Checkpoint {
    pub fn detector(&self) -> Result<Detector> {
        Detector::from_params(self.model.clone(), self.params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: usize,
    model: ModelConfig,
    encoder: EncoderConfig,
    optimizer: OptimizerConfig,
    optimizer_t: u64,
    sampler: SamplerState,
    tensors: Map<String, Value>,
}

fn tensors(ckpt: &Checkpoint) -> Vec<(String, &Array2<f64>)> {
    let mut out: Vec<(String, &Array2<f64>)> = ckpt.params.iter().map(|(_, n, v)| (n.to_string(), v)).collect();
    for (id, name, _) in ckpt.params.iter() {
        out.push((format!("optim.first/{name}"), &ckpt.optimizer.first[id.0]));
    }
    if ckpt.optimizer.config.kind == OptimizerKind::Adam {
        for (id, name, _) in ckpt.params.iter() {
            out.push((format!("optim.second/{name}"), &ckpt.optimizer.second[id.0]));
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Map::new();
    for (name, value) in tensors(ckpt) {
        let entry = TensorEntry {
            shape: [value.nrows(), value.ncols()],
            dtype: "f32".into(),
            offset: blob.len(),
        };
        for &v in value.iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.insert(name, serde_json::to_value(entry).expect("entry serializes"));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: ckpt.step,
        model: ckpt.model.clone(),
        encoder: ckpt.encoder.clone(),
        optimizer: ckpt.optimizer.config.clone(),
        optimizer_t: ckpt.optimizer.t,
        sampler: ckpt.sampler.clone(),
        tensors: entries,
    };
    std::fs::write(
        dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    std::fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let blob_path = dir.join(BLOB);
    for p in [&manifest_path, &blob_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::from_json(&manifest_path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::CorruptCheckpoint(format!("unknown format `{}`", manifest.format)));
    }
    let blob = std::fs::read(&blob_path)?;

    let mut expected = 0usize;
    let mut decoded: Vec<(String, Array2<f64>)> = Vec::new();
    for (name, value) in &manifest.tensors {
        let entry: TensorEntry = serde_json::from_value(value.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has dtype {}", entry.dtype)));
        }
        let len = entry.shape[0] * entry.shape[1];
        let end = entry.offset + 4 * len;
        if entry.offset != expected || end > blob.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` spans bytes {}..{end} of a {}-byte blob",
                entry.offset,
                blob.len()
            )));
        }
        let values: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values).expect("length checked");
        decoded.push((name.clone(), arr));
        expected = end;
    }
    if expected != blob.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest describes {expected} bytes, blob holds {}",
            blob.len()
        )));
    }

    let mut params = ParamStore::default();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, arr) in decoded {
        if name.starts_with("optim.first/") {
            first.push(arr);
        } else if name.starts_with("optim.second/") {
            second.push(arr);
        } else {
            params.insert(name, arr);
        }
    }
    let detector = Detector::from_params(manifest.model.clone(), params)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let want_second = if manifest.optimizer.kind == OptimizerKind::Adam {
        detector.params.len()
    } else {
        0
    };
    if first.len() != detector.params.len() || second.len() != want_second {
        return Err(Error::CorruptCheckpoint("optimizer state does not cover every parameter".into()));
    }
    Ok(Checkpoint {
        model: manifest.model,
        params: detector.params,
        optimizer: Optimizer {
            config: manifest.optimizer,
            first,
            second,
            t: manifest.optimizer_t,
        },
        sampler: manifest.sampler,
        step: manifest.step,
        encoder: manifest.encoder,
    })
}
