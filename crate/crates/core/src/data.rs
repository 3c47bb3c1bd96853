//! Synthetic detection datasets with deliberately inconsistent taxonomies.
//!
//! Scenes are stored as render recipes (primitive shapes on a plain canvas)
//! rather than rasters; every image can be re-rendered bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{iou, BoxCxCyWh, GroundTruth};
use crate::error::{Error, Result};
use crate::model::{HeadLookup, ImageBatch};
use crate::semantic::{CalibratedClassifier, LabelSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Frame,
    XMark,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Frame,
        ShapeKind::XMark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Frame => "frame",
            ShapeKind::XMark => "x-mark",
        }
    }

    pub fn from_name(name: &str) -> Option<ShapeKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether local coordinates `(u, v) ∈ [-1, 1]²` are painted.
    /// `slack` is half a pixel in local units, so edge rows are always hit.
    fn covers(self, u: f64, v: f64, slack: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => true,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0 + slack,
            ShapeKind::Ring => (0.45..=1.0).contains(&r2),
            ShapeKind::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0 + slack,
            ShapeKind::Frame => u.abs().max(v.abs()) >= 0.6,
            ShapeKind::XMark => (u.abs() - v.abs()).abs() <= 0.35,
        }
    }
}

pub fn master_taxonomy() -> Vec<String> {
    ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

/// One painted shape. Covers pixels `[cx - ex, cx + ex) × [cy - ey, cy + ey)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub center: [u32; 2],
    pub extent: [u32; 2],
}

impl Primitive {
    pub fn normalized_box(&self, canvas: [u32; 2]) -> BoxCxCyWh {
        let (w, h) = (canvas[0] as f64, canvas[1] as f64);
        [
            self.center[0] as f64 / w,
            self.center[1] as f64 / h,
            2.0 * self.extent[0] as f64 / w,
            2.0 * self.extent[1] as f64 / h,
        ]
    }

    fn within(&self, canvas: [u32; 2]) -> bool {
        self.extent[0] > 0
            && self.extent[1] > 0
            && self.center[0] >= self.extent[0]
            && self.center[1] >= self.extent[1]
            && self.center[0] + self.extent[0] <= canvas[0]
            && self.center[1] + self.extent[1] <= canvas[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    /// `[width, height]` in pixels.
    pub canvas: [u32; 2],
    pub background: [f64; 3],
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if !p.within(self.canvas) {
                return Err(Error::Schema(format!("primitive {i} leaves the canvas or has zero extent")));
            }
        }
        Ok(())
    }
}

/// Paints a recipe in order (later primitives occlude earlier ones) and
/// returns one box per primitive, in recipe order.
pub fn render(recipe: &SceneRecipe) -> (Array3<f64>, Vec<BoxCxCyWh>) {
    let [w, h] = recipe.canvas;
    let mut img = Array3::zeros((h as usize, w as usize, 3));
    for y in 0..h as usize {
        for x in 0..w as usize {
            for c in 0..3 {
                img[[y, x, c]] = recipe.background[c];
            }
        }
    }
    for p in &recipe.primitives {
        let (cx, cy) = (p.center[0] as f64, p.center[1] as f64);
        let (ex, ey) = (p.extent[0] as f64, p.extent[1] as f64);
        let slack = 0.5 / ex.min(ey);
        let x0 = p.center[0] - p.extent[0];
        let y0 = p.center[1] - p.extent[1];
        for y in y0..p.center[1] + p.extent[1] {
            let v = (y as f64 + 0.5 - cy) / ey;
            for x in x0..p.center[0] + p.extent[0] {
                let u = (x as f64 + 0.5 - cx) / ex;
                if p.kind.covers(u, v, slack) {
                    for c in 0..3 {
                        img[[y as usize, x as usize, c]] = p.color[c];
                    }
                }
            }
        }
    }
    let boxes = recipe.primitives.iter().map(|p| p.normalized_box(recipe.canvas)).collect();
    (img, boxes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub recipe: SceneRecipe,
    pub annotations: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub label_space: LabelSpace,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
}

impl DatasetSpec {
    /// Number of training images.
    pub fn size(&self) -> usize {
        self.train.len()
    }

    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_space.dataset_id != self.dataset_id {
            return Err(Error::Schema("label space belongs to another dataset".into()));
        }
        let m = self.label_space.len();
        for rec in self.train.iter().chain(&self.val) {
            rec.recipe.validate()?;
            rec.annotations.validate(m)?;
        }
        Ok(())
    }

    /// Renders images of a split into a batch.
    pub fn batch(&self, split: Split, indices: &[usize]) -> ImageBatch {
        let records = self.split(split);
        ImageBatch {
            pixels: indices.iter().map(|&i| render(&records[i].recipe).0).collect(),
            dataset_id: self.dataset_id.clone(),
            image_ids: indices.to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// family generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyMode {
    /// Same scenes, each dataset annotates its own subset of the master taxonomy.
    SharedImage,
    /// Separate scenes per dataset with distinct colour palettes.
    DisjointDomain,
    /// Separate scenes with Zipf-distributed class frequencies.
    LongTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub classes: Vec<String>,
    /// Overrides the family-wide scene count (not allowed in shared-image mode).
    #[serde(default)]
    pub scenes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub mode: FamilyMode,
    pub scenes: usize,
    pub val_scenes: usize,
    pub canvas: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: u32,
    pub max_extent: u32,
    pub zipf_exponent: f64,
    /// Give every shape kind its own hue (shifted per palette) instead of
    /// drawing colours independently of the class.
    pub class_hues: bool,
    pub classes: Vec<String>,
    pub datasets: Vec<DatasetEntry>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        let master = master_taxonomy();
        Self {
            mode: FamilyMode::SharedImage,
            scenes: 400,
            val_scenes: 100,
            canvas: 64,
            min_objects: 1,
            max_objects: 6,
            min_extent: 4,
            max_extent: 12,
            zipf_exponent: 1.5,
            class_hues: true,
            datasets: vec![
                DatasetEntry {
                    id: "A".into(),
                    classes: master[..4].to_vec(),
                    scenes: None,
                },
                DatasetEntry {
                    id: "B".into(),
                    classes: master.clone(),
                    scenes: None,
                },
            ],
            classes: master,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent || 2 * self.max_extent > self.canvas {
            return Err(Error::Config("object extents do not fit the canvas".into()));
        }
        for c in &self.classes {
            if ShapeKind::from_name(c).is_none() {
                return Err(Error::Config(format!("`{c}` is not a known shape")));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for d in &self.datasets {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::Config(format!("dataset id `{}` repeated", d.id)));
            }
            if d.classes.is_empty() {
                return Err(Error::Config(format!("dataset `{}` has no classes", d.id)));
            }
            LabelSpace::new(d.id.clone(), d.classes.clone())?;
            for c in &d.classes {
                if !self.classes.contains(c) {
                    return Err(Error::Config(format!(
                        "class `{c}` of dataset `{}` is not in the master taxonomy",
                        d.id
                    )));
                }
            }
            if self.mode == FamilyMode::SharedImage && d.scenes.is_some() {
                return Err(Error::Config("per-dataset scene counts are not allowed for shared images".into()));
            }
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf_exponent must be non-negative".into()));
        }
        Ok(())
    }
}

const PALETTES: [[[f64; 3]; 4]; 3] = [
    [[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.4, 0.9], [0.95, 0.85, 0.2]],
    [[0.95, 0.55, 0.1], [0.8, 0.3, 0.6], [0.6, 0.1, 0.1], [0.95, 0.75, 0.6]],
    [[0.1, 0.6, 0.7], [0.3, 0.3, 0.8], [0.5, 0.8, 0.9], [0.2, 0.5, 0.3]],
];
const BACKGROUNDS: [[f64; 3]; 3] = [[0.05, 0.05, 0.05], [0.15, 0.12, 0.1], [0.9, 0.9, 0.92]];

fn class_hue(kind: ShapeKind, palette: usize, jitter: f64) -> [f64; 3] {
    let index = ShapeKind::ALL.iter().position(|&k| k == kind).expect("listed") as f64;
    let hue = (index / ShapeKind::ALL.len() as f64 + 0.04 * palette as f64).fract();
    let sat = [0.85, 0.6, 0.95][palette % 3];
    let val = 0.85 + jitter;
    hsv_to_rgb(hue, sat, val)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct SceneSampler<'a> {
    cfg: &'a FamilyConfig,
    /// Class names to draw from and their probabilities.
    classes: &'a [String],
    probs: Vec<f64>,
    palette: usize,
}

impl SceneSampler<'_> {
    fn draw_class(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    fn scene(&self, seed: u64) -> SceneRecipe {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let canvas = [cfg.canvas, cfg.canvas];
        let mut primitives: Vec<Primitive> = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = ShapeKind::from_name(&self.classes[self.draw_class(&mut rng)]).expect("validated");
            let color = if cfg.class_hues {
                class_hue(kind, self.palette, rng.random_range(-0.1..0.1))
            } else {
                PALETTES[self.palette][rng.random_range(0..4)]
            };
            // a few attempts to avoid heavy overlap; keep the last one otherwise
            let mut candidate = None;
            for _ in 0..20 {
                let ex = rng.random_range(cfg.min_extent..=cfg.max_extent);
                let ey = rng.random_range(cfg.min_extent..=cfg.max_extent);
                let cx = rng.random_range(ex..=cfg.canvas - ex);
                let cy = rng.random_range(ey..=cfg.canvas - ey);
                let p = Primitive {
                    kind,
                    color,
                    center: [cx, cy],
                    extent: [ex, ey],
                };
                let b = p.normalized_box(canvas);
                let crowded = primitives.iter().any(|o| iou(&o.normalized_box(canvas), &b) > 0.3);
                candidate = Some(p);
                if !crowded {
                    break;
                }
            }
            primitives.push(candidate.expect("at least one attempt"));
        }
        SceneRecipe {
            canvas,
            background: BACKGROUNDS[self.palette],
            primitives,
            seed,
        }
    }
}

fn zipf_probs(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Annotates a scene under a label space: objects whose class is outside
/// the space are left unannotated (background for that dataset).
fn annotate(recipe: &SceneRecipe, space: &LabelSpace) -> GroundTruth {
    let mut gt = GroundTruth::default();
    for p in &recipe.primitives {
        if let Some(c) = space.index_of(p.kind.name()) {
            gt.boxes.push(p.normalized_box(recipe.canvas));
            gt.classes.push(c);
        }
    }
    gt
}

fn scene_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.random()
}

pub fn generate_family(cfg: &FamilyConfig, seed: u64) -> Result<Vec<DatasetSpec>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.datasets.len());
    match cfg.mode {
        FamilyMode::SharedImage => {
            let sampler = SceneSampler {
                cfg,
                classes: &cfg.classes,
                probs: vec![1.0 / cfg.classes.len() as f64; cfg.classes.len()],
                palette: 0,
            };
            let train: Vec<SceneRecipe> = (0..cfg.scenes).map(|i| sampler.scene(scene_seed(seed, 0, i as u64))).collect();
            let val: Vec<SceneRecipe> = (0..cfg.val_scenes)
                .map(|i| sampler.scene(scene_seed(seed, 1, i as u64)))
                .collect();
            for d in &cfg.datasets {
                let space = LabelSpace::new(d.id.clone(), d.classes.clone())?;
                let records = |scenes: &[SceneRecipe]| {
                    scenes
                        .iter()
                        .map(|r| ImageRecord {
                            annotations: annotate(r, &space),
                            recipe: r.clone(),
                        })
                        .collect::<Vec<_>>()
                };
                out.push(DatasetSpec {
                    dataset_id: d.id.clone(),
                    train: records(&train),
                    val: records(&val),
                    label_space: space.clone(),
                });
            }
        }
        FamilyMode::DisjointDomain | FamilyMode::LongTail => {
            for (di, d) in cfg.datasets.iter().enumerate() {
                let space = LabelSpace::new(d.id.clone(), d.classes.clone())?;
                let probs = match cfg.mode {
                    FamilyMode::LongTail => zipf_probs(d.classes.len(), cfg.zipf_exponent),
                    _ => vec![1.0 / d.classes.len() as f64; d.classes.len()],
                };
                let sampler = SceneSampler {
                    cfg,
                    classes: &d.classes,
                    probs,
                    palette: if cfg.mode == FamilyMode::DisjointDomain {
                        di % PALETTES.len()
                    } else {
                        0
                    },
                };
                let n_train = d.scenes.unwrap_or(cfg.scenes);
                let stream = 2 + 2 * di as u64;
                let make = |n: usize, stream: u64| {
                    (0..n)
                        .map(|i| {
                            let recipe = sampler.scene(scene_seed(seed, stream, i as u64));
                            ImageRecord {
                                annotations: annotate(&recipe, &space),
                                recipe,
                            }
                        })
                        .collect::<Vec<_>>()
                };
                out.push(DatasetSpec {
                    dataset_id: d.id.clone(),
                    train: make(n_train, stream),
                    val: make(cfg.val_scenes, stream + 1),
                    label_space: space,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// persistence

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    dataset_id: String,
    classes: Vec<String>,
    train: Vec<ImageRecord>,
    val: Vec<ImageRecord>,
}

pub fn save_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        dataset_id: spec.dataset_id.clone(),
        classes: spec.label_space.names().to_vec(),
        train: spec.train.clone(),
        val: spec.val.clone(),
    };
    let text = serde_json::to_string(&manifest).expect("serialisable");
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSpec> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::from_json(&path, e))?;
    let space = LabelSpace::new(m.dataset_id.clone(), m.classes)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let spec = DatasetSpec {
        dataset_id: m.dataset_id,
        label_space: space,
        train: m.train,
        val: m.val,
    };
    spec.validate()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// registry

/// Datasets and their frozen classifiers, in registration order.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: Vec<(DatasetSpec, CalibratedClassifier)>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: DatasetSpec, classifier: CalibratedClassifier) -> Result<()> {
        if self.index.contains_key(&spec.dataset_id) {
            return Err(Error::DuplicateDataset(spec.dataset_id));
        }
        if classifier.num_classes() != spec.label_space.len() {
            return Err(Error::Shape(format!(
                "classifier for `{}` has {} rows for {} classes",
                spec.dataset_id,
                classifier.num_classes(),
                spec.label_space.len()
            )));
        }
        let mut classifier = classifier;
        classifier.dataset_id = spec.dataset_id.clone();
        self.index.insert(spec.dataset_id.clone(), self.entries.len());
        self.entries.push((spec, classifier));
        Ok(())
    }

    pub fn lookup(&self, id: &str) -> Result<(&DatasetSpec, &CalibratedClassifier)> {
        self.index
            .get(id)
            .map(|&i| (&self.entries[i].0, &self.entries[i].1))
            .ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }

    pub fn classifier(&self, id: &str) -> Result<&CalibratedClassifier> {
        self.lookup(id).map(|(_, c)| c)
    }

    pub fn dataset(&self, id: &str) -> Result<&DatasetSpec> {
        self.lookup(id).map(|(d, _)| d)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DatasetSpec, &CalibratedClassifier)> {
        self.entries.iter().map(|(d, c)| (d, c))
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|(d, _)| d.dataset_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A registry holding only the listed datasets, in the given order.
    pub fn subset(&self, ids: &[&str]) -> Result<Registry> {
        let mut r = Registry::new();
        for id in ids {
            let (d, c) = self.lookup(id)?;
            r.register(d.clone(), c.clone())?;
        }
        Ok(r)
    }
}

impl HeadLookup for Registry {
    fn head(&self, dataset_id: &str) -> Result<&CalibratedClassifier> {
        self.classifier(dataset_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(primitives: Vec<Primitive>) -> SceneRecipe {
        SceneRecipe {
            canvas: [64, 64],
            background: [0.1, 0.2, 0.3],
            primitives,
            seed: 0,
        }
    }

    #[test]
    fn centered_square_has_half_canvas_box() {
        let r = recipe(vec![Primitive {
            kind: ShapeKind::Square,
            color: [1.0, 1.0, 1.0],
            center: [32, 32],
            extent: [16, 16],
        }]);
        let (img, boxes) = render(&r);
        assert_eq!(boxes, vec![[0.5, 0.5, 0.5, 0.5]]);
        assert_eq!(img[[16, 16, 0]], 1.0);
        assert_eq!(img[[15, 16, 0]], 0.1);
        assert_eq!(img[[47, 47, 2]], 1.0);
        assert_eq!(img[[48, 47, 2]], 0.3);
    }

    #[test]
    fn empty_recipe_is_background() {
        let (img, boxes) = render(&recipe(vec![]));
        assert!(boxes.is_empty());
        assert!(img.outer_iter().all(|row| row.outer_iter().all(|px| px.to_vec() == vec![0.1, 0.2, 0.3])));
    }

    #[test]
    fn every_shape_touches_its_box_edges() {
        for kind in ShapeKind::ALL {
            for extent in [[4, 4], [5, 9], [12, 6]] {
                let r = recipe(vec![Primitive {
                    kind,
                    color: [1.0, 1.0, 1.0],
                    center: [30, 31],
                    extent,
                }]);
                let (img, boxes) = render(&r);
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for y in 0..64 {
                    for x in 0..64 {
                        if img[[y, x, 0]] == 1.0 {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                let raster = [
                    (x0 + x1) as f64 / 128.0,
                    (y0 + y1) as f64 / 128.0,
                    (x1 - x0) as f64 / 64.0,
                    (y1 - y0) as f64 / 64.0,
                ];
                assert_eq!(raster, boxes[0], "{kind:?} {extent:?}");
            }
        }
    }

    #[test]
    fn overlapping_primitives_keep_one_box_each() {
        let p = |c| Primitive {
            kind: ShapeKind::Circle,
            color: [1.0, 0.0, 0.0],
            center: [c, c],
            extent: [10, 10],
        };
        let (_, boxes) = render(&recipe(vec![p(30), p(32), p(34)]));
        assert_eq!(boxes.len(), 3);
    }

    #[test]
    fn subset_classes_outside_master_rejected() {
        let mut cfg = FamilyConfig::default();
        cfg.datasets[0].classes = vec!["circle".into(), "hexagon".into()];
        assert!(matches!(generate_family(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn registry_lookup_and_duplicates() {
        let cfg = FamilyConfig {
            scenes: 3,
            val_scenes: 1,
            ..FamilyConfig::default()
        };
        let family = generate_family(&cfg, 0).unwrap();
        let enc = crate::semantic::SyntheticEncoder::new(0);
        let mut reg = Registry::new();
        for d in &family {
            let t = crate::semantic::encode_labels(&d.label_space, &enc).unwrap();
            reg.register(d.clone(), crate::semantic::calibrate(&d.dataset_id, &t).unwrap()).unwrap();
        }
        assert_eq!(reg.classifier("A").unwrap().num_classes(), 4);
        assert_eq!(reg.ids(), vec!["A", "B"]);
        let (d, c) = reg.lookup("B").unwrap();
        assert!(matches!(
            reg.clone().register(d.clone(), c.clone()),
            Err(Error::DuplicateDataset(_))
        ));
        assert!(matches!(reg.lookup("x"), Err(Error::UnknownDataset(_))));
    }
}
