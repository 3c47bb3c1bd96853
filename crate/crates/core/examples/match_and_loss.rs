//! Hungarian matching of predictions to ground truth and the resulting
//! classification, L1 and GIoU losses.

use ndarray::array;
use plaindet::detection::{giou, DetectionSet, GroundTruth};
use plaindet::matching::{detection_loss, hungarian_match, pairwise_cost, LossWeights};

fn main() -> plaindet::Result<()> {
    let det = DetectionSet {
        dataset_id: "toy".into(),
        boxes: array![
            [0.52, 0.48, 0.30, 0.22],
            [0.20, 0.25, 0.10, 0.12],
            [0.75, 0.70, 0.22, 0.30],
        ],
        class_scores: array![[0.8, 0.1], [0.3, 0.2], [0.1, 0.7]],
    };
    let gt = GroundTruth::new(vec![[0.74, 0.72, 0.2, 0.3], [0.5, 0.5, 0.3, 0.2]], vec![1, 0]);
    let w = LossWeights::default();

    let cost = pairwise_cost(&det, &gt, &w);
    println!("cost matrix (queries x objects):\n{cost:.3}");
    let m = hungarian_match(&cost);
    println!("pairs {:?}, unmatched {:?}, total cost {:.3}", m.pairs, m.unmatched_queries, m.total_cost(&cost));
    for &(q, j) in &m.pairs {
        println!("  query {q} -> object {j}: GIoU {:.3}", giou(&det.box_at(q), &gt.boxes[j])?);
    }
    let loss = detection_loss(&det, &gt, &m, &w);
    println!("cls {:.4}  l1 {:.4}  giou {:.4}  total {:.4}", loss.cls, loss.l1, loss.giou, loss.total);
    Ok(())
}
