//! Average precision per dataset, mean AP across datasets, and evaluation
//! under a swapped-in classifier.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{render, DatasetSpec, Registry, Split};
use crate::detection::{iou, BoxCxCyWh, DetectionSet, GroundTruth};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::semantic::CalibratedClassifier;

/// One scored box of a single class in a single image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BoxCxCyWh,
}

/// All-point interpolated AP of one class.
///
/// Detections are visited in descending score order (ties keep input
/// order) and each is matched to the unmatched ground truth in its image
/// with the highest IoU, provided that IoU reaches `iou_thr`.
pub fn class_average_precision(dets: &[ScoredBox], gts: &[Vec<BoxCxCyWh>], iou_thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let mut best = None;
        let mut best_iou = iou_thr;
        if let Some(image_gts) = gts.get(d.image) {
            for (j, g) in image_gts.iter().enumerate() {
                if taken[d.image][j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best {
            taken[d.image][j] = true;
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    area_under_envelope(&points)
}

/// Area under the monotone precision envelope of a PR curve given as
/// `(recall, precision)` points in ranking order.
pub fn area_under_envelope(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<(f64, f64)> = points.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in envelope {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Macro-averaged AP over the classes that occur in the ground truth.
pub fn average_precision(dets: &[DetectionSet], gts: &[GroundTruth], iou_thr: f64) -> f64 {
    assert_eq!(dets.len(), gts.len(), "one detection set per image");
    let m = dets.first().map(|d| d.num_classes()).unwrap_or(0);
    let mut per_class = Vec::new();
    for c in 0..m {
        let class_gts: Vec<Vec<BoxCxCyWh>> = gts
            .iter()
            .map(|g| {
                g.boxes
                    .iter()
                    .zip(&g.classes)
                    .filter(|(_, &k)| k == c)
                    .map(|(b, _)| *b)
                    .collect()
            })
            .collect();
        if class_gts.iter().all(|g| g.is_empty()) {
            continue;
        }
        let scored: Vec<ScoredBox> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, d)| {
                (0..d.num_queries()).map(move |q| ScoredBox {
                    image: img,
                    score: d.class_scores[[q, c]],
                    bbox: d.box_at(q),
                })
            })
            .collect();
        per_class.push(class_average_precision(&scored, &class_gts, iou_thr));
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn average_precision_coco(dets: &[DetectionSet], gts: &[GroundTruth]) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    thresholds.iter().map(|&t| average_precision(dets, gts, t)).sum::<f64>() / thresholds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAp {
    pub dataset_id: String,
    pub ap: f64,
    /// Mean over IoU 0.5:0.95 when requested.
    pub ap_coco: Option<f64>,
    pub n_images: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub datasets: Vec<DatasetAp>,
    /// Arithmetic mean of the per-dataset APs.
    pub map: f64,
}

impl ApReport {
    pub fn from_entries(datasets: Vec<DatasetAp>) -> Self {
        let map = if datasets.is_empty() {
            0.0
        } else {
            datasets.iter().map(|d| d.ap).sum::<f64>() / datasets.len() as f64
        };
        Self { datasets, map }
    }

    pub fn ap(&self, dataset_id: &str) -> Option<f64> {
        self.datasets.iter().find(|d| d.dataset_id == dataset_id).map(|d| d.ap)
    }

    /// `{dataset_id: {"ap": .., "n_images": ..}, "mAP": ..}`
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        for d in &self.datasets {
            let mut entry = Map::new();
            entry.insert("ap".into(), Value::from(d.ap));
            entry.insert("n_images".into(), Value::from(d.n_images));
            if let Some(c) = d.ap_coco {
                entry.insert("ap_50_95".into(), Value::from(c));
            }
            obj.insert(d.dataset_id.clone(), Value::Object(entry));
        }
        obj.insert("mAP".into(), Value::from(self.map));
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub iou: f64,
    pub coco_range: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Val,
            iou: 0.5,
            coco_range: false,
        }
    }
}

/// Runs the detector over a split of `dataset` using `classifier` as the head.
pub fn evaluate_dataset(
    detector: &Detector,
    dataset: &DatasetSpec,
    classifier: &CalibratedClassifier,
    opts: &EvalOptions,
) -> Result<DatasetAp> {
    let records = dataset.split(opts.split);
    if records.is_empty() {
        return Err(Error::EmptySplit(dataset.dataset_id.clone()));
    }
    let mut dets = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());
    for rec in records {
        let (img, _) = render(&rec.recipe);
        dets.push(detector.detect(&img, classifier)?);
        gts.push(rec.annotations.clone());
    }
    Ok(DatasetAp {
        dataset_id: dataset.dataset_id.clone(),
        ap: average_precision(&dets, &gts, opts.iou),
        ap_coco: opts.coco_range.then(|| average_precision_coco(&dets, &gts)),
        n_images: records.len(),
        n_gt: gts.iter().map(|g| g.len()).sum(),
    })
}

/// Every registered dataset evaluated with its own head.
pub fn evaluate(detector: &Detector, registry: &Registry, opts: &EvalOptions) -> Result<ApReport> {
    let entries = registry
        .iter()
        .map(|(d, c)| evaluate_dataset(detector, d, c, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ApReport::from_entries(entries))
}

/// Evaluates a label space the model was not trained on by substituting its
/// calibrated classifier (which also feeds the query basis). No parameter
/// is touched.
pub fn zeroshot_swap(
    detector: &Detector,
    source_head_id: &str,
    target: &DatasetSpec,
    target_classifier: &CalibratedClassifier,
    opts: &EvalOptions,
) -> Result<DatasetAp> {
    if target_classifier.dim() != detector.config.embed_dim {
        return Err(Error::Shape(format!(
            "target classifier width {} differs from the model's {} (source head `{source_head_id}`)",
            target_classifier.dim(),
            detector.config.embed_dim
        )));
    }
    evaluate_dataset(detector, target, target_classifier, opts)
}

/// AP of a detector that emits `k` uniformly random boxes with uniformly
/// random class scores.
pub fn random_detector_ap(dataset: &DatasetSpec, k: usize, opts: &EvalOptions, seed: u64) -> Result<f64> {
    let records = dataset.split(opts.split);
    if records.is_empty() {
        return Err(Error::EmptySplit(dataset.dataset_id.clone()));
    }
    let m = dataset.label_space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::with_capacity(records.len());
    for _ in records {
        let boxes = ndarray::Array2::from_shape_fn((k, 4), |(_, c)| match c {
            0 | 1 => rng.random_range(0.0..1.0),
            _ => rng.random_range(0.05..0.5),
        });
        let class_scores = ndarray::Array2::from_shape_fn((k, m), |_| rng.random_range(0.0..1.0));
        dets.push(DetectionSet {
            dataset_id: dataset.dataset_id.clone(),
            boxes,
            class_scores,
        });
    }
    let gts: Vec<GroundTruth> = records.iter().map(|r| r.annotations.clone()).collect();
    Ok(average_precision(&dets, &gts, opts.iou))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(image: usize, score: f64, bbox: BoxCxCyWh) -> ScoredBox {
        ScoredBox { image, score, bbox }
    }

    #[test]
    fn perfect_single_detection() {
        let b = [0.5, 0.5, 0.2, 0.2];
        assert_eq!(class_average_precision(&[sb(0, 0.01, b)], &[vec![b]], 0.5), 1.0);
    }

    #[test]
    fn no_detections_scores_zero() {
        assert_eq!(class_average_precision(&[], &[vec![[0.5, 0.5, 0.2, 0.2]]], 0.5), 0.0);
    }

    #[test]
    fn ground_truth_matched_once() {
        let b = [0.5, 0.5, 0.2, 0.2];
        // duplicate detection of the single object is a false positive
        let ap = class_average_precision(&[sb(0, 0.9, b), sb(0, 0.8, b)], &[vec![b]], 0.5);
        assert_eq!(ap, 1.0);
        let ap = class_average_precision(&[sb(0, 0.9, b), sb(0, 0.8, b)], &[vec![b, [0.1, 0.1, 0.1, 0.1]]], 0.5);
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn report_mean_and_json() {
        let e = |id: &str, ap| DatasetAp {
            dataset_id: id.into(),
            ap,
            ap_coco: None,
            n_images: 3,
            n_gt: 5,
        };
        let r = ApReport::from_entries(vec![e("a", 0.4), e("b", 0.6)]);
        assert!((r.map - 0.5).abs() < 1e-15);
        let j = r.to_json();
        assert_eq!(j["a"]["n_images"], 3);
        assert!((j["mAP"].as_f64().unwrap() - 0.5).abs() < 1e-15);
        let single = ApReport::from_entries(vec![e("a", 0.37)]);
        assert_eq!(single.map, 0.37);
    }
}
