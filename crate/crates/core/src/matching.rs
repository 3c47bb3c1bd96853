//! Set matching between queries and ground truth, and the per-dataset
//! detection loss built on top of it.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detection::{giou_with_grad, DetectionSet, GroundTruth};

/// Weights shared by the matching cost and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    /// The quantity the hardness sampler records as a dataset's box loss.
    pub fn box_loss(&self, l1: f64, giou: f64) -> f64 {
        self.l1 * l1 + self.giou * giou
    }
}

/// Matching cost between every query and every ground-truth object, `k × n`.
pub fn pairwise_cost(det: &DetectionSet, gt: &GroundTruth, w: &LossWeights) -> Array2<f64> {
    let k = det.num_queries();
    let n = gt.len();
    Array2::from_shape_fn((k, n), |(q, j)| {
        let pb = det.box_at(q);
        let tb = &gt.boxes[j];
        let l1: f64 = pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
        let g = giou_with_grad(&pb, tb).0;
        w.cls * -det.class_scores[[q, gt.classes[j]]] + w.l1 * l1 + w.giou * (1.0 - g)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(q, j)| cost[[q, j]]).sum()
    }
}

/// Minimum-cost injective assignment between rows (queries) and columns
/// (ground truth) of size `min(k, n)`.
///
/// Panics if any cost is not finite.
pub fn hungarian_match(cost: &Array2<f64>) -> MatchResult {
    assert!(cost.iter().all(|v| v.is_finite()), "assignment costs must be finite");
    let (k, n) = cost.dim();
    let mut pairs = if k == 0 || n == 0 {
        Vec::new()
    } else if n <= k {
        // each gt gets a distinct query
        let t = cost.t().to_owned();
        assign_rows(&t)
            .into_iter()
            .enumerate()
            .map(|(j, q)| (q, j))
            .collect()
    } else {
        assign_rows(cost).into_iter().enumerate().collect::<Vec<_>>()
    };
    pairs.sort_unstable();
    let mut used = vec![false; k];
    for &(q, _) in &pairs {
        used[q] = true;
    }
    let unmatched_queries = (0..k).filter(|&q| !used[q]).collect();
    MatchResult {
        pairs,
        unmatched_queries,
    }
}

/// Shortest augmenting path assignment with potentials for `rows <= cols`.
/// Returns the column assigned to each row.
fn assign_rows(cost: &Array2<f64>) -> Vec<usize> {
    let (rows, cols) = cost.dim();
    debug_assert!(rows <= cols);
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut row_of_col = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0; rows];
    for j in 1..=cols {
        if row_of_col[j] != 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dataset_id: String,
    /// Mean binary cross-entropy over all `k × m` scores.
    pub cls: f64,
    /// Mean L1 distance over matched pairs.
    pub l1: f64,
    /// Mean `1 - GIoU` over matched pairs.
    pub giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(dataset_id: &str, cls: f64, l1: f64, giou: f64, w: &LossWeights) -> Self {
        Self {
            dataset_id: dataset_id.to_string(),
            cls,
            l1,
            giou,
            total: w.cls * cls + w.l1 * l1 + w.giou * giou,
        }
    }
}

const SCORE_CLAMP: f64 = 1e-12;

fn classification_targets(k: usize, m: usize, gt: &GroundTruth, matching: &MatchResult) -> Array2<f64> {
    let mut t = Array2::zeros((k, m));
    for &(q, j) in &matching.pairs {
        t[[q, gt.classes[j]]] = 1.0;
    }
    t
}

/// Loss of a detection set against its ground truth under a fixed matching.
pub fn detection_loss(det: &DetectionSet, gt: &GroundTruth, matching: &MatchResult, w: &LossWeights) -> LossBreakdown {
    let (k, m) = det.class_scores.dim();
    let targets = classification_targets(k, m, gt, matching);
    let mut bce = 0.0;
    for (&s, &t) in det.class_scores.iter().zip(targets.iter()) {
        let s = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        bce -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
    }
    let cls = if k * m > 0 { bce / (k * m) as f64 } else { 0.0 };
    let (l1, giou) = box_terms(det, gt, matching);
    LossBreakdown::new(&det.dataset_id, cls, l1, giou, w)
}

fn box_terms(det: &DetectionSet, gt: &GroundTruth, matching: &MatchResult) -> (f64, f64) {
    if matching.pairs.is_empty() {
        return (0.0, 0.0);
    }
    let mut l1 = 0.0;
    let mut giou = 0.0;
    for &(q, j) in &matching.pairs {
        let pb = det.box_at(q);
        let tb = &gt.boxes[j];
        l1 += pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum::<f64>();
        giou += 1.0 - giou_with_grad(&pb, tb).0;
    }
    let n = matching.pairs.len() as f64;
    (l1 / n, giou / n)
}

/// Loss plus its gradient with respect to the classification logits
/// (`scores = sigmoid(logits)`) and the predicted boxes.
#[derive(Debug, Clone)]
pub struct LossWithGrad {
    pub breakdown: LossBreakdown,
    pub d_logits: Array2<f64>,
    pub d_boxes: Array2<f64>,
}

/// Same loss as [`detection_loss`], evaluated from logits with a
/// numerically stable cross-entropy, together with analytic gradients of
/// the weighted total.
pub fn detection_loss_from_logits(
    dataset_id: &str,
    logits: &Array2<f64>,
    boxes: &Array2<f64>,
    gt: &GroundTruth,
    matching: &MatchResult,
    w: &LossWeights,
) -> LossWithGrad {
    let (k, m) = logits.dim();
    let targets = classification_targets(k, m, gt, matching);
    let denom = (k * m).max(1) as f64;
    let mut bce = 0.0;
    let mut d_logits = Array2::zeros((k, m));
    for ((d, &z), &t) in d_logits.iter_mut().zip(logits.iter()).zip(targets.iter()) {
        bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *d = w.cls * (crate::tape::sigmoid(z) - t) / denom;
    }
    let cls = bce / denom;

    let mut d_boxes = Array2::zeros(boxes.dim());
    let (mut l1, mut giou) = (0.0, 0.0);
    if !matching.pairs.is_empty() {
        let n = matching.pairs.len() as f64;
        for &(q, j) in &matching.pairs {
            let r = boxes.row(q);
            let pb = [r[0], r[1], r[2], r[3]];
            let tb = &gt.boxes[j];
            let (g, gg) = giou_with_grad(&pb, tb);
            giou += 1.0 - g;
            for c in 0..4 {
                let diff = pb[c] - tb[c];
                l1 += diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                d_boxes[[q, c]] += (w.l1 * sign - w.giou * gg[c]) / n;
            }
        }
        l1 /= n;
        giou /= n;
    }
    LossWithGrad {
        breakdown: LossBreakdown::new(dataset_id, cls, l1, giou, w),
        d_logits,
        d_boxes,
    }
}
