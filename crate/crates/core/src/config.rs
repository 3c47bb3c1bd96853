//! Training configuration and the glue that turns dataset directories into
//! a registry of frozen, calibrated heads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DatasetSpec, Registry};
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::semantic::{
    calibrate, encode_labels_with, load_embeddings, CalibratedClassifier, EmbeddingTable, PromptTemplate,
    SyntheticEncoder,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    /// Second-moment decay (Adam only).
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

/// Text encoder used for datasets that ship without `embeddings.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub seed: u64,
    pub prompt_template: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_template: PromptTemplate::default().as_str().to_string(),
        }
    }
}

impl EncoderConfig {
    pub fn encoder(&self, dim: usize) -> SyntheticEncoder {
        SyntheticEncoder::new(self.seed).with_dim(dim)
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        PromptTemplate::new(self.prompt_template.clone())
    }

    /// Raw embedding table of a dataset's label space.
    pub fn embed(&self, dataset: &DatasetSpec, dim: usize) -> Result<EmbeddingTable> {
        encode_labels_with(&dataset.label_space, &self.encoder(dim), &self.template()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate on the validation split every this many steps; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub datasets: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            batch_size: 8,
            eval_every: 500,
            seed: 0,
            encoder: EncoderConfig::default(),
            datasets: Vec::new(),
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer lr must be positive and decay rates in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || o.clip < 0.0 {
            return Err(Error::Config("optimizer eps must be positive and clip non-negative".into()));
        }
        for (name, w) in [("cls", self.loss.cls), ("l1", self.loss.l1), ("giou", self.loss.giou)] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative")));
            }
        }
        self.encoder.template()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::from_json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("config serializes"))?;
        Ok(())
    }
}

/// Calibrated head of a dataset directory: `embeddings.json` when present,
/// otherwise the configured synthetic encoder.
pub fn dataset_classifier(
    dataset: &DatasetSpec,
    dir: Option<&Path>,
    encoder: &EncoderConfig,
    dim: usize,
) -> Result<CalibratedClassifier> {
    let file = dir.map(|d| d.join("embeddings.json")).filter(|p| p.exists());
    let table = match file {
        Some(path) => {
            let table = load_embeddings(&path)?.select(dataset.label_space.names())?;
            if table.dim() != dim {
                return Err(Error::Shape(format!(
                    "{} holds width-{} embeddings, the model expects {dim}",
                    path.display(),
                    table.dim()
                )));
            }
            table
        }
        None => encoder.embed(dataset, dim)?,
    };
    calibrate(&dataset.dataset_id, &table)
}

/// Loads every directory and registers it with its calibrated head.
pub fn load_registry(dirs: &[PathBuf], encoder: &EncoderConfig, dim: usize) -> Result<Registry> {
    let mut registry = Registry::new();
    for dir in dirs {
        let spec = load_dataset(dir)?;
        let head = dataset_classifier(&spec, Some(dir), encoder, dim)?;
        registry.register(spec, head)?;
    }
    Ok(registry)
}

/// Registry over in-memory datasets, all using the synthetic encoder.
pub fn registry_from_specs(specs: Vec<DatasetSpec>, encoder: &EncoderConfig, dim: usize) -> Result<Registry> {
    let mut registry = Registry::new();
    for spec in specs {
        let head = dataset_classifier(&spec, None, encoder, dim)?;
        registry.register(spec, head)?;
    }
    Ok(registry)
}
