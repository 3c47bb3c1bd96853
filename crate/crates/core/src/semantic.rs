//! Frozen label-embedding classifiers shared across dataset heads.
//!
//! Class names are turned into prompts, embedded by a [`TextEncoder`], and
//! calibrated by subtracting the embedding of the empty string before L2
//! normalisation. The empty-string embedding carries the frequency bias
//! that otherwise makes common nouns similar to everything.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "the photo is {}";

/// Minimum distance between a class embedding and the NULL embedding.
pub const CALIBRATION_EPS: f64 = 1e-8;

/// Ordered class names of one dataset. Order defines class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub dataset_id: String,
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(dataset_id: impl Into<String>, names: Vec<String>) -> Result<Self> {
        let dataset_id = dataset_id.into();
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateClass {
                    dataset: dataset_id,
                    name: n.clone(),
                });
            }
        }
        Ok(Self { dataset_id, names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Prompt template with a single `{}` placeholder for the class name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate(String);

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_PROMPT_TEMPLATE.to_string())
    }
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if template.matches("{}").count() != 1 {
            return Err(Error::Config(format!(
                "prompt template `{template}` must contain exactly one `{{}}`"
            )));
        }
        Ok(Self(template))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn render(&self, class_name: &str) -> String {
        self.0.replacen("{}", class_name, 1)
    }
}

pub fn build_prompts(space: &LabelSpace) -> Result<Vec<String>> {
    build_prompts_with(space, &PromptTemplate::default())
}

pub fn build_prompts_with(space: &LabelSpace, template: &PromptTemplate) -> Result<Vec<String>> {
    if space.is_empty() {
        return Err(Error::EmptyLabelSpace(space.dataset_id.clone()));
    }
    Ok(space.names.iter().map(|n| template.render(n)).collect())
}

/// What an encoder is asked to embed.
#[derive(Debug, Clone, Copy)]
pub enum EmbedRequest<'a> {
    Class { name: &'a str, prompt: &'a str },
    /// The bare empty string.
    Null,
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn embed(&self, request: EmbedRequest<'_>) -> Result<Vec<f64>>;
}

/// Raw (uncalibrated) embeddings for one label space plus the NULL embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub labels: Vec<String>,
    /// One row per label, `m × d`.
    pub vectors: Array2<f64>,
    pub null_vector: Array1<f64>,
}

impl EmbeddingTable {
    pub fn new(labels: Vec<String>, vectors: Array2<f64>, null_vector: Array1<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyTable);
        }
        if vectors.nrows() != labels.len() {
            return Err(Error::Schema(format!(
                "{} labels but {} vectors",
                labels.len(),
                vectors.nrows()
            )));
        }
        if vectors.ncols() != null_vector.len() || null_vector.is_empty() {
            return Err(Error::Schema(format!(
                "vector width {} differs from null width {}",
                vectors.ncols(),
                null_vector.len()
            )));
        }
        if !vectors.iter().chain(null_vector.iter()).all(|v| v.is_finite()) {
            return Err(Error::Schema("non-finite embedding component".into()));
        }
        Ok(Self {
            labels,
            vectors,
            null_vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.null_vector.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Cosine similarity between raw rows.
    pub fn similarity(&self) -> Result<Array2<f64>> {
        similarity_matrix(self.vectors.view())
    }

    /// Keeps the rows for `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let mut rows = Vec::with_capacity(names.len());
        for n in names {
            let i = self
                .labels
                .iter()
                .position(|l| l == n)
                .ok_or_else(|| Error::MissingEmbedding(n.clone()))?;
            rows.push(i);
        }
        Self::new(
            names.to_vec(),
            self.vectors.select(ndarray::Axis(0), &rows),
            self.null_vector.clone(),
        )
    }
}

pub fn encode_labels(space: &LabelSpace, encoder: &dyn TextEncoder) -> Result<EmbeddingTable> {
    encode_labels_with(space, encoder, &PromptTemplate::default())
}

pub fn encode_labels_with(
    space: &LabelSpace,
    encoder: &dyn TextEncoder,
    template: &PromptTemplate,
) -> Result<EmbeddingTable> {
    let prompts = build_prompts_with(space, template)?;
    let d = encoder.dim();
    let mut vectors = Array2::zeros((space.len(), d));
    for (i, (name, prompt)) in space.names.iter().zip(&prompts).enumerate() {
        let v = encoder.embed(EmbedRequest::Class { name, prompt })?;
        if v.len() != d {
            return Err(Error::Schema(format!("encoder returned width {} for `{name}`, expected {d}", v.len())));
        }
        vectors.row_mut(i).assign(&Array1::from(v));
    }
    let null = Array1::from(encoder.embed(EmbedRequest::Null)?);
    EmbeddingTable::new(space.names.clone(), vectors, null)
}

/// Frozen classifier of one dataset head: unit-norm rows in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedClassifier {
    pub dataset_id: String,
    pub labels: Vec<String>,
    pub matrix: Array2<f64>,
}

impl CalibratedClassifier {
    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn similarity(&self) -> Array2<f64> {
        similarity_matrix(self.matrix.view()).expect("calibrated rows are unit norm")
    }

    /// Wraps an already-normalised matrix, checking the unit-norm invariant.
    pub fn from_matrix(dataset_id: impl Into<String>, labels: Vec<String>, matrix: Array2<f64>) -> Result<Self> {
        if labels.len() != matrix.nrows() {
            return Err(Error::Schema("label count differs from classifier rows".into()));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Schema(format!("classifier row {i} has norm {n}")));
            }
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            labels,
            matrix,
        })
    }
}

pub fn calibrate(dataset_id: &str, table: &EmbeddingTable) -> Result<CalibratedClassifier> {
    calibrate_with_eps(dataset_id, table, CALIBRATION_EPS)
}

pub fn calibrate_with_eps(dataset_id: &str, table: &EmbeddingTable, eps: f64) -> Result<CalibratedClassifier> {
    let mut matrix = &table.vectors - &table.null_vector;
    for (i, mut row) in matrix.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n < eps {
            return Err(Error::DegenerateEmbedding(table.labels[i].clone()));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(CalibratedClassifier {
        dataset_id: dataset_id.to_string(),
        labels: table.labels.clone(),
        matrix,
    })
}

/// Pairwise cosine similarity of the rows of `rows`.
pub fn similarity_matrix(rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut normed = rows.to_owned();
    for (i, mut row) in normed.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroRow(i));
        }
        row.mapv_inplace(|v| v / n);
    }
    let mut sim = normed.dot(&normed.t());
    // exact symmetry and clamp rounding excursions
    let m = sim.nrows();
    for i in 0..m {
        for j in i + 1..m {
            let v = sim[[i, j]].clamp(-1.0, 1.0);
            sim[[i, j]] = v;
            sim[[j, i]] = v;
        }
        sim[[i, i]] = sim[[i, i]].clamp(-1.0, 1.0);
    }
    Ok(sim)
}

/// Mean absolute off-diagonal entry of a square matrix.
pub fn mean_abs_off_diagonal(sim: &Array2<f64>) -> f64 {
    let m = sim.nrows();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += sim[[i, j]].abs();
            }
        }
    }
    total / (m * (m - 1)) as f64
}

// ---------------------------------------------------------------------------
// Persistence: {"dim": d, "null": [..], "labels": {"name": [..], ..}}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut labels = Map::new();
    for (name, row) in table.labels.iter().zip(table.vectors.rows()) {
        labels.insert(name.clone(), serde_json::to_value(row.to_vec()).expect("finite floats"));
    }
    let mut doc = Map::new();
    doc.insert("dim".into(), Value::from(table.dim()));
    doc.insert(
        "null".into(),
        serde_json::to_value(table.null_vector.to_vec()).expect("finite floats"),
    );
    doc.insert("labels".into(), Value::Object(labels));
    let text = serde_json::to_string_pretty(&Value::Object(doc)).expect("serialisable");
    fs::write(path, text)?;
    Ok(())
}

#[derive(Deserialize)]
struct EmbeddingFile {
    dim: usize,
    null: Vec<f64>,
    labels: Map<String, Value>,
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_embeddings(&text, path)
}

fn parse_embeddings(text: &str, path: &Path) -> Result<EmbeddingTable> {
    let file: EmbeddingFile = serde_json::from_str(text).map_err(|e| Error::from_json(path, e))?;
    if file.labels.is_empty() {
        return Err(Error::EmptyTable);
    }
    let d = file.dim;
    if d == 0 {
        return Err(Error::Schema("dim must be positive".into()));
    }
    if file.null.len() != d {
        return Err(Error::Schema(format!("null vector has length {}, dim is {d}", file.null.len())));
    }
    let mut labels = Vec::with_capacity(file.labels.len());
    let mut vectors = Array2::zeros((file.labels.len(), d));
    for (i, (name, value)) in file.labels.into_iter().enumerate() {
        let row: Vec<f64> = serde_json::from_value(value)
            .map_err(|e| Error::parse(path.display().to_string(), format!("labels.{name}: {e}")))?;
        if row.len() != d {
            return Err(Error::Schema(format!("label `{name}` has length {}, dim is {d}", row.len())));
        }
        vectors.row_mut(i).assign(&Array1::from(row));
        labels.push(name);
    }
    EmbeddingTable::new(labels, vectors, Array1::from(file.null))
}

// ---------------------------------------------------------------------------
// Encoders

/// Looks up pre-extracted embeddings by class name.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    table: EmbeddingTable,
    index: HashMap<String, usize>,
}

impl FileEncoder {
    pub fn new(table: EmbeddingTable) -> Self {
        let index = table.labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { table, index }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(load_embeddings(path)?))
    }
}

impl TextEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed(&self, request: EmbedRequest<'_>) -> Result<Vec<f64>> {
        match request {
            EmbedRequest::Null => Ok(self.table.null_vector.to_vec()),
            EmbedRequest::Class { name, .. } => self
                .index
                .get(name)
                .map(|&i| self.table.vectors.row(i).to_vec())
                .ok_or_else(|| Error::MissingEmbedding(name.to_string())),
        }
    }
}

/// Deterministic stand-in for a text encoder that reproduces a shared
/// frequency-bias direction.
///
/// A class prompt maps to `normalize(u + beta * b)` where `u` is a
/// pseudo-random direction seeded by the prompt and `b` is a unit bias
/// direction shared by every class. The empty string maps to `b` plus
/// small seeded noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticEncoder {
    pub seed: u64,
    pub dim: usize,
    /// Range for the per-class bias coefficient when no override exists.
    pub beta_range: (f64, f64),
    #[serde(default)]
    pub beta_overrides: Vec<(String, f64)>,
    pub null_noise: f64,
}

impl SyntheticEncoder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            dim: 64,
            beta_range: (0.5, 1.5),
            beta_overrides: Vec::new(),
            null_noise: 0.05,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn with_beta(mut self, label: impl Into<String>, beta: f64) -> Self {
        self.beta_overrides.push((label.into(), beta));
        self
    }

    fn rng_for(&self, tag: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a(self.seed, tag.as_bytes()))
    }

    pub fn bias_direction(&self) -> Array1<f64> {
        unit_gaussian(&mut self.rng_for("\u{0}bias"), self.dim)
    }

    fn beta_for(&self, name: &str, prompt: &str) -> f64 {
        if let Some((_, b)) = self.beta_overrides.iter().rev().find(|(l, _)| l == name) {
            return *b;
        }
        let (lo, hi) = self.beta_range;
        if hi <= lo {
            return lo;
        }
        self.rng_for(&format!("\u{0}beta:{prompt}")).random_range(lo..hi)
    }
}

impl TextEncoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, request: EmbedRequest<'_>) -> Result<Vec<f64>> {
        let bias = self.bias_direction();
        match request {
            EmbedRequest::Null => {
                let noise = unit_gaussian(&mut self.rng_for("\u{0}null"), self.dim);
                Ok((&bias + &(noise * self.null_noise)).to_vec())
            }
            EmbedRequest::Class { name, prompt } => {
                let u = unit_gaussian(&mut self.rng_for(prompt), self.dim);
                let v = &u + &(&bias * self.beta_for(name, prompt));
                let n = v.dot(&v).sqrt();
                Ok((v / n).to_vec())
            }
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v = Array1::from_shape_fn(dim, |_| {
        // Box-Muller
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let n = v.dot(&v).sqrt();
    v / n
}
