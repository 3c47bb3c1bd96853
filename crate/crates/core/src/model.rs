//! The shared query-based detector: patch encoder, query decoder,
//! class-agnostic box head and cosine classification against frozen
//! per-dataset classifiers.

use std::collections::HashMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{ClassAwareQueries, QueryMode};
use crate::detection::{DetectionSet, GroundTruth};
use crate::error::{Error, Result};
use crate::matching::{detection_loss_from_logits, hungarian_match, pairwise_cost, LossBreakdown, LossWeights};
use crate::params::{xavier, ParamId, ParamStore};
use crate::semantic::CalibratedClassifier;
use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    /// Width of the text-embedding space the classifiers live in.
    pub embed_dim: usize,
    /// Largest label space the mix-weight MLP can address.
    pub max_classes: usize,
    pub logit_scale: f64,
    pub query_mode: QueryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_queries: 20,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            patch: 8,
            embed_dim: 64,
            max_classes: 8,
            logit_scale: 20.0,
            query_mode: QueryMode::ClassAware,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_queries", self.num_queries),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("max_classes", self.max_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model must be divisible by heads".into()));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be a multiple of 4 for 2-D positional codes".into()));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Images from a single dataset, all of the same size.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `H × W × 3`, values in `[0, 1]`.
    pub pixels: Vec<Array3<f64>>,
    pub dataset_id: String,
    pub image_ids: Vec<usize>,
}

/// Encoder output: one `P × d_model` token matrix per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tokens: Vec<Array2<f64>>,
    pub grid: (usize, usize),
}

/// Resolves a dataset id to its frozen classifier.
pub trait HeadLookup {
    fn head(&self, dataset_id: &str) -> Result<&CalibratedClassifier>;
}

impl HeadLookup for HashMap<String, CalibratedClassifier> {
    fn head(&self, dataset_id: &str) -> Result<&CalibratedClassifier> {
        self.get(dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))
    }
}

impl HeadLookup for CalibratedClassifier {
    fn head(&self, dataset_id: &str) -> Result<&CalibratedClassifier> {
        if self.dataset_id == dataset_id {
            Ok(self)
        } else {
            Err(Error::UnknownDataset(dataset_id.to_string()))
        }
    }
}

// ---------------------------------------------------------------------------
// parameter layout

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    attn: Attention,
    ln1: Norm,
    ffn: Mlp,
    ln2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    self_attn: Attention,
    ln1: Norm,
    cross_attn: Attention,
    ln2: Norm,
    ffn: Mlp,
    ln3: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    patch_embed: Linear,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    pub box_head: Mlp,
    pub class_proj: Linear,
    pub basis_mlp: Mlp,
    pub mix_mlp: Mlp,
    pub learnable_queries: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.store.insert(format!("{name}.w"), xavier(&mut self.rng, fan_in, fan_out));
        let b = self.store.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let g = self.store.insert(format!("{name}.g"), Array2::ones((1, dim)));
        let b = self.store.insert(format!("{name}.b"), Array2::zeros((1, dim)));
        Norm { g, b }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.l1"), input, hidden),
            l2: self.linear(&format!("{name}.l2"), hidden, output),
        }
    }
}

const MIX_BIAS_GAIN: f64 = 3.0;

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Layout {
        let d = cfg.d_model;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let patch_embed = init.linear("patch_embed", cfg.patch * cfg.patch * 3, d);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderBlock {
                attn: init.attention(&format!("encoder.{i}.attn"), d),
                ln1: init.norm(&format!("encoder.{i}.ln1"), d),
                ffn: init.mlp(&format!("encoder.{i}.ffn"), d, cfg.ffn_dim, d),
                ln2: init.norm(&format!("encoder.{i}.ln2"), d),
            })
            .collect();
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderBlock {
                self_attn: init.attention(&format!("decoder.{i}.self_attn"), d),
                ln1: init.norm(&format!("decoder.{i}.ln1"), d),
                cross_attn: init.attention(&format!("decoder.{i}.cross_attn"), d),
                ln2: init.norm(&format!("decoder.{i}.ln2"), d),
                ffn: init.mlp(&format!("decoder.{i}.ffn"), d, cfg.ffn_dim, d),
                ln3: init.norm(&format!("decoder.{i}.ln3"), d),
            })
            .collect();
        let box_head = init.mlp("box_head", d, d, 4);
        let class_proj = init.linear("class_proj", d, cfg.embed_dim);
        let basis_mlp = init.mlp("compositor.basis", cfg.embed_dim, d, d);
        let mix_mlp = init.mlp("compositor.mix", d, d, cfg.num_queries * cfg.max_classes);
        let learnable_queries = init
            .store
            .insert("queries.learnable", xavier(&mut init.rng, cfg.num_queries, d));
        // each query starts from its own mixture of the class basis
        let spread = xavier(&mut init.rng, cfg.num_queries, cfg.max_classes).mapv(|v| v * MIX_BIAS_GAIN);
        *init.store.value_mut(mix_mlp.l2.b) = spread
            .into_shape_with_order((1, cfg.num_queries * cfg.max_classes))
            .expect("contiguous");
        Layout {
            patch_embed,
            encoder,
            decoder,
            box_head,
            class_proj,
            basis_mlp,
            mix_mlp,
            learnable_queries,
        }
    }
}

// ---------------------------------------------------------------------------

/// Model parameters together with the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) layout: Layout,
}

impl PartialEq for Detector {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = Layout::build(&config, &mut params, seed);
        params.round_to_f32();
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a detector around previously saved parameter values.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in params.iter() {
            let expect = fresh.params.value(id);
            if fresh.params.name(id) != name || expect.dim() != value.dim() {
                return Err(Error::Shape(format!("parameter `{name}` does not match the configuration")));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }

    /// Ids of the final box-head layer.
    pub fn box_head_output(&self) -> (ParamId, ParamId) {
        (self.layout.box_head.l2.w, self.layout.box_head.l2.b)
    }

    // ---- building blocks on a tape ----

    pub(crate) fn linear(&self, tape: &mut Tape, x: Var, l: Linear) -> Var {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub(crate) fn mlp(&self, tape: &mut Tape, x: Var, m: Mlp) -> Var {
        let h = self.linear(tape, x, m.l1);
        let h = tape.gelu(h);
        self.linear(tape, h, m.l2)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Var {
        let g = tape.param(&self.params, n.g);
        let b = tape.param(&self.params, n.b);
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, queries: Var, context: Var, a: Attention) -> Var {
        let q = self.linear(tape, queries, a.q);
        let k = self.linear(tape, context, a.k);
        let v = self.linear(tape, context, a.v);
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, cat, a.o)
    }

    pub(crate) fn encode_on(&self, tape: &mut Tape, image: &Array3<f64>) -> Result<(Var, (usize, usize))> {
        let (patches, grid) = patchify(image, self.config.patch)?;
        let x = tape.input(patches);
        let x = self.linear(tape, x, self.layout.patch_embed);
        let pos = tape.input(positional_encoding(grid, self.config.d_model));
        let mut x = tape.add(x, pos);
        for block in &self.layout.encoder {
            let a = self.attention(tape, x, x, block.attn);
            let r = tape.add(x, a);
            let x1 = self.norm(tape, r, block.ln1);
            let f = self.mlp(tape, x1, block.ffn);
            let r = tape.add(x1, f);
            x = self.norm(tape, r, block.ln2);
        }
        Ok((x, grid))
    }

    pub(crate) fn decode_on(&self, tape: &mut Tape, tokens: Var, queries: Var) -> Var {
        let mut x = queries;
        for block in &self.layout.decoder {
            let a = self.attention(tape, x, x, block.self_attn);
            let r = tape.add(x, a);
            let x1 = self.norm(tape, r, block.ln1);
            let c = self.attention(tape, x1, tokens, block.cross_attn);
            let r = tape.add(x1, c);
            let x2 = self.norm(tape, r, block.ln2);
            let f = self.mlp(tape, x2, block.ffn);
            let r = tape.add(x2, f);
            x = self.norm(tape, r, block.ln3);
        }
        x
    }

    pub(crate) fn classify_on(&self, tape: &mut Tape, qhat: Var, classifier: &CalibratedClassifier) -> Result<Var> {
        if classifier.dim() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "classifier width {} differs from projection width {}",
                classifier.dim(),
                self.config.embed_dim
            )));
        }
        let p = self.linear(tape, qhat, self.layout.class_proj);
        let p = tape.normalize_rows(p);
        let w = tape.input(classifier.matrix.clone());
        let cos = tape.matmul_t(p, w);
        Ok(tape.scale(cos, self.config.logit_scale))
    }

    pub(crate) fn boxes_on(&self, tape: &mut Tape, qhat: Var) -> Var {
        let raw = self.mlp(tape, qhat, self.layout.box_head);
        tape.sigmoid(raw)
    }

    /// Full per-image pipeline; returns `(logits, boxes)` vars.
    pub(crate) fn forward_on(
        &self,
        tape: &mut Tape,
        image: &Array3<f64>,
        classifier: &CalibratedClassifier,
    ) -> Result<(Var, Var)> {
        let (tokens, _) = self.encode_on(tape, image)?;
        let queries = self.queries_on(tape, tokens, classifier, self.config.query_mode)?;
        let qhat = self.decode_on(tape, tokens, queries);
        let logits = self.classify_on(tape, qhat, classifier)?;
        let boxes = self.boxes_on(tape, qhat);
        Ok((logits, boxes))
    }

    // ---- value-level operations ----

    pub fn encode_image(&self, batch: &ImageBatch) -> Result<FeatureMap> {
        let mut tokens = Vec::with_capacity(batch.pixels.len());
        let mut grid = (0, 0);
        for img in &batch.pixels {
            let mut tape = Tape::new();
            let (t, g) = self.encode_on(&mut tape, img)?;
            if !tokens.is_empty() && g != grid {
                return Err(Error::Shape("images in a batch must share their size".into()));
            }
            grid = g;
            tokens.push(tape.value(t).clone());
        }
        Ok(FeatureMap { tokens, grid })
    }

    /// Refines queries against one image's tokens.
    pub fn decode(&self, tokens: &Array2<f64>, queries: &ClassAwareQueries) -> Result<Array2<f64>> {
        let d = self.config.d_model;
        if tokens.ncols() != d || queries.queries.ncols() != d {
            return Err(Error::Shape(format!(
                "token width {} / query width {} differ from d_model {d}",
                tokens.ncols(),
                queries.queries.ncols()
            )));
        }
        let mut tape = Tape::new();
        let t = tape.input(tokens.clone());
        let q = tape.input(queries.queries.clone());
        let out = self.decode_on(&mut tape, t, q);
        Ok(tape.value(out).clone())
    }

    /// `logit_scale · cos(proj(q̂), ŵ_c)` for every query and class.
    pub fn classify(&self, qhat: &Array2<f64>, classifier: &CalibratedClassifier) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let q = tape.input(qhat.clone());
        let l = self.classify_on(&mut tape, q, classifier)?;
        Ok(tape.value(l).clone())
    }

    pub fn regress_boxes(&self, qhat: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let q = tape.input(qhat.clone());
        let b = self.boxes_on(&mut tape, q);
        tape.value(b).clone()
    }

    pub fn forward(&self, batch: &ImageBatch, heads: &dyn HeadLookup) -> Result<Vec<DetectionSet>> {
        let classifier = heads.head(&batch.dataset_id)?;
        batch
            .pixels
            .iter()
            .map(|img| self.detect(img, classifier))
            .collect()
    }

    /// Runs the detector on one image with the given head.
    pub fn detect(&self, image: &Array3<f64>, classifier: &CalibratedClassifier) -> Result<DetectionSet> {
        let mut tape = Tape::new();
        let (logits, boxes) = self.forward_on(&mut tape, image, classifier)?;
        Ok(DetectionSet {
            dataset_id: classifier.dataset_id.clone(),
            boxes: tape.value(boxes).clone(),
            class_scores: tape.value(logits).mapv(crate::tape::sigmoid),
        })
    }

    /// Loss on one image and the gradient of its weighted total. Matching is
    /// computed on detached predictions.
    pub fn loss_and_grad(
        &self,
        image: &Array3<f64>,
        gt: &GroundTruth,
        classifier: &CalibratedClassifier,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut tape = Tape::new();
        let (logits, boxes) = self.forward_on(&mut tape, image, classifier)?;
        let logit_v = tape.value(logits).clone();
        let box_v = tape.value(boxes).clone();
        if let Some(bad) = non_finite(&classifier.dataset_id, &logit_v, &box_v, weights) {
            return Ok((bad, Gradients::default()));
        }
        let det = DetectionSet {
            dataset_id: classifier.dataset_id.clone(),
            boxes: box_v.clone(),
            class_scores: logit_v.mapv(crate::tape::sigmoid),
        };
        let matching = hungarian_match(&pairwise_cost(&det, gt, weights));
        let lg = detection_loss_from_logits(&classifier.dataset_id, &logit_v, &box_v, gt, &matching, weights);
        let total = lg.breakdown.total;
        let out = tape.external(total, vec![(logits, lg.d_logits), (boxes, lg.d_boxes)]);
        let grads = tape.backward(out);
        Ok((lg.breakdown, grads))
    }

    /// Loss value only (used by finite-difference checks).
    pub fn loss(
        &self,
        image: &Array3<f64>,
        gt: &GroundTruth,
        classifier: &CalibratedClassifier,
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (logits, boxes) = self.forward_on(&mut tape, image, classifier)?;
        if let Some(bad) = non_finite(&classifier.dataset_id, tape.value(logits), tape.value(boxes), weights) {
            return Ok(bad);
        }
        let det = DetectionSet {
            dataset_id: classifier.dataset_id.clone(),
            boxes: tape.value(boxes).clone(),
            class_scores: tape.value(logits).mapv(crate::tape::sigmoid),
        };
        let matching = hungarian_match(&pairwise_cost(&det, gt, weights));
        Ok(detection_loss_from_logits(
            &classifier.dataset_id,
            tape.value(logits),
            tape.value(boxes),
            gt,
            &matching,
            weights,
        )
        .breakdown)
    }
}

/// A NaN breakdown when the network output is not finite; matching such
/// outputs is meaningless.
fn non_finite(dataset_id: &str, logits: &Array2<f64>, boxes: &Array2<f64>, w: &LossWeights) -> Option<LossBreakdown> {
    let finite = logits.iter().chain(boxes.iter()).all(|v| v.is_finite());
    (!finite).then(|| LossBreakdown::new(dataset_id, f64::NAN, f64::NAN, f64::NAN, w))
}

/// Splits an image into flattened non-overlapping patches, row-major.
pub fn patchify(image: &Array3<f64>, patch: usize) -> Result<(Array2<f64>, (usize, usize))> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * 3));
    for py in 0..gh {
        for px in 0..gw {
            let mut row = out.row_mut(py * gw + px);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..3 {
                        row[k] = image[[py * patch + y, px * patch + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, (gh, gw)))
}

/// Fixed 2-D sine-cosine codes: first half of the channels encodes the row,
/// second half the column.
pub fn positional_encoding(grid: (usize, usize), d_model: usize) -> Array2<f64> {
    let (gh, gw) = grid;
    let half = d_model / 2;
    let pairs = half / 2;
    let mut out = Array2::zeros((gh * gw, d_model));
    for y in 0..gh {
        for x in 0..gw {
            let mut row = out.row_mut(y * gw + x);
            for i in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                row[2 * i] = (y as f64 * freq).sin();
                row[2 * i + 1] = (y as f64 * freq).cos();
                row[half + 2 * i] = (x as f64 * freq).sin();
                row[half + 2 * i + 1] = (x as f64 * freq).cos();
            }
        }
    }
    out
}
