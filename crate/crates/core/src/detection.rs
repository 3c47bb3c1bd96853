//! Box geometry and the prediction/annotation containers shared by the
//! model, the loss and the evaluator.
//!
//! Boxes are `[cx, cy, w, h]` in image-normalised coordinates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type BoxCxCyWh = [f64; 4];

pub fn to_corners(b: &BoxCxCyWh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn check_extent(b: &BoxCxCyWh) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidBox(format!("{b:?}")));
    }
    Ok(())
}

pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let [ax1, ay1, ax2, ay2] = to_corners(a);
    let [bx1, by1, bx2, by2] = to_corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU in `(-1, 1]`.
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> Result<f64> {
    check_extent(a)?;
    check_extent(b)?;
    Ok(giou_with_grad(a, b).0)
}

/// GIoU of `pred` against `target` and its gradient w.r.t. `pred`.
pub(crate) fn giou_with_grad(pred: &BoxCxCyWh, target: &BoxCxCyWh) -> (f64, BoxCxCyWh) {
    let [x1, y1, x2, y2] = to_corners(pred);
    let [tx1, ty1, tx2, ty2] = to_corners(target);

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = pred[2] * pred[3];
    let area_t = target[2] * target[3];
    let union = area_p + area_t - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let enclose = cw * ch;

    let value = inter / union - (enclose - union) / enclose;

    // partials of value = I/U + U/C - 1 with U = A_p + A_t - I
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / enclose;
    let d_area = -inter / (union * union) + 1.0 / enclose;
    let d_enclose = -union / (enclose * enclose);

    // corner gradients [x1, y1, x2, y2]
    let mut g = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 > tx1 {
            g[0] -= d_inter * ih;
        }
        if x2 < tx2 {
            g[2] += d_inter * ih;
        }
        if y1 > ty1 {
            g[1] -= d_inter * iw;
        }
        if y2 < ty2 {
            g[3] += d_inter * iw;
        }
    }
    if x1 < tx1 {
        g[0] -= d_enclose * ch;
    }
    if x2 > tx2 {
        g[2] += d_enclose * ch;
    }
    if y1 < ty1 {
        g[1] -= d_enclose * cw;
    }
    if y2 > ty2 {
        g[3] += d_enclose * cw;
    }

    let grad = [
        g[0] + g[2],
        g[1] + g[3],
        (g[2] - g[0]) / 2.0 + d_area * pred[3],
        (g[3] - g[1]) / 2.0 + d_area * pred[2],
    ];
    (value, grad)
}

/// Annotations of one image under one label space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCxCyWh>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BoxCxCyWh>, classes: Vec<usize>) -> Self {
        assert_eq!(boxes.len(), classes.len());
        Self { boxes, classes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::Schema("box/class count mismatch".into()));
        }
        for (b, &c) in self.boxes.iter().zip(&self.classes) {
            if c >= num_classes {
                return Err(Error::Schema(format!("class index {c} out of range for {num_classes} classes")));
            }
            if !(b[2] > 0.0 && b[2] <= 1.0 && b[3] > 0.0 && b[3] <= 1.0) {
                return Err(Error::InvalidBox(format!("{b:?}")));
            }
        }
        Ok(())
    }
}

/// Per-query boxes and per-class scores under the active dataset head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub dataset_id: String,
    /// `k × 4`
    pub boxes: Array2<f64>,
    /// `k × m`, each in `[0, 1]`
    pub class_scores: Array2<f64>,
}

impl DetectionSet {
    pub fn num_queries(&self) -> usize {
        self.boxes.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.ncols()
    }

    pub fn box_at(&self, q: usize) -> BoxCxCyWh {
        let r = self.boxes.row(q);
        [r[0], r[1], r[2], r[3]]
    }
}
