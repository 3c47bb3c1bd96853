mod common;

use ndarray::{array, Array2};
use plaindet::detection::{giou, DetectionSet, GroundTruth};
use plaindet::matching::*;
use plaindet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::brute_force_assignment;

/// Second GIoU implementation written straight from the definition.
fn oracle_giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let corners = |x: [f64; 4]| [x[0] - x[2] / 2.0, x[1] - x[3] / 2.0, x[0] + x[2] / 2.0, x[1] + x[3] / 2.0];
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (p[2].max(q[2]) - p[0].min(q[0])) * (p[3].max(q[3]) - p[1].min(q[1]));
    inter / union - (hull - union) / hull
}

fn oracle_cost(scores: &Array2<f64>, boxes: &Array2<f64>, gt: &GroundTruth, w: &LossWeights) -> Array2<f64> {
    let mut c = Array2::zeros((boxes.nrows(), gt.len()));
    for q in 0..boxes.nrows() {
        let b = [boxes[[q, 0]], boxes[[q, 1]], boxes[[q, 2]], boxes[[q, 3]]];
        for j in 0..gt.len() {
            let t = gt.boxes[j];
            let l1: f64 = (0..4).map(|i| (b[i] - t[i]).abs()).sum();
            c[[q, j]] = -w.cls * scores[[q, gt.classes[j]]] + w.l1 * l1 + w.giou * (1.0 - oracle_giou(b, t));
        }
    }
    c
}

fn det(scores: Array2<f64>, boxes: Array2<f64>) -> DetectionSet {
    DetectionSet {
        dataset_id: "t".into(),
        boxes,
        class_scores: scores,
    }
}

#[test]
fn giou_cases() {
    let a = [0.25, 0.25, 0.5, 0.5];
    assert_eq!(giou(&a, &a).unwrap(), 1.0);
    // these two boxes meet only at the point (0.5, 0.5)
    let b = [0.75, 0.75, 0.5, 0.5];
    let v = giou(&a, &b).unwrap();
    assert!((v - oracle_giou(a, b)).abs() < 1e-12);
    assert!((v + 0.5).abs() < 1e-12, "{v}");
    let far = giou(&[0.01, 0.01, 1e-3, 1e-3], &[0.99, 0.99, 1e-3, 1e-3]).unwrap();
    assert!(far > -1.0 && far < -0.99);
    assert!(matches!(giou(&[0.5, 0.5, -0.1, 0.2], &a), Err(Error::InvalidBox(_))));
}

#[test]
fn cost_cases() {
    let w = LossWeights::default();
    let gt = GroundTruth::new(vec![[0.4, 0.6, 0.2, 0.3]], vec![1]);
    let perfect = det(array![[0.0, 1.0]], array![[0.4, 0.6, 0.2, 0.3]]);
    let c = pairwise_cost(&perfect, &gt, &w);
    assert_eq!(c.dim(), (1, 1));
    assert!((c[[0, 0]] + w.cls).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.0..1.0));
    let boxes = Array2::from_shape_fn((5, 4), |(_, c)| if c < 2 { rng.random_range(0.1..0.9) } else { rng.random_range(0.05..0.5) });
    let gt = GroundTruth::new(
        (0..4).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)]).collect(),
        vec![0, 2, 1, 2],
    );
    let lib = pairwise_cost(&det(scores.clone(), boxes.clone()), &gt, &w);
    let oracle = oracle_cost(&scores, &boxes, &gt, &w);
    for (a, b) in lib.iter().zip(oracle.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn two_by_two_optima() {
    assert_eq!(hungarian_match(&array![[0.0, 1.0], [1.0, 0.0]]).pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(hungarian_match(&array![[1.0, 0.0], [0.0, 1.0]]).pairs, vec![(0, 1), (1, 0)]);
}

#[test]
fn hungarian_equals_brute_force_up_to_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 1..=6 {
        for n in 1..=6 {
            for _ in 0..100 {
                let cost = Array2::from_shape_fn((k, n), |_| rng.random_range(-5.0..5.0));
                let m = hungarian_match(&cost);
                assert_eq!(m.pairs.len(), k.min(n));
                let mut qs: Vec<_> = m.pairs.iter().map(|p| p.0).collect();
                let mut js: Vec<_> = m.pairs.iter().map(|p| p.1).collect();
                qs.dedup();
                js.sort_unstable();
                js.dedup();
                assert_eq!(qs.len(), k.min(n));
                assert_eq!(js.len(), k.min(n));
                assert_eq!(m.unmatched_queries.len(), k - k.min(n));
                let best = brute_force_assignment(&cost);
                assert!((m.total_cost(&cost) - best).abs() < 1e-9, "{k}x{n}");
            }
        }
    }
}

#[test]
fn fixed_fixture_matches_hand_recomputation() {
    let w = LossWeights::default();
    let scores = array![[0.9, 0.2], [0.3, 0.6], [0.1, 0.1]];
    let boxes = array![[0.5, 0.5, 0.4, 0.4], [0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]];
    let gt = GroundTruth::new(vec![[0.45, 0.5, 0.3, 0.4]], vec![0]);
    let d = det(scores.clone(), boxes.clone());

    let m = hungarian_match(&pairwise_cost(&d, &gt, &w));
    let lib = detection_loss(&d, &gt, &m, &w);

    let cost = oracle_cost(&scores, &boxes, &gt, &w);
    let q = (0..3).min_by(|&a, &b| cost[[a, 0]].total_cmp(&cost[[b, 0]])).unwrap();
    assert_eq!(m.pairs, vec![(q, 0)]);
    let mut bce = 0.0;
    for i in 0..3 {
        for c in 0..2 {
            let t = if i == q && c == 0 { 1.0 } else { 0.0 };
            let s: f64 = scores[[i, c]];
            bce -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
        }
    }
    let cls = bce / 6.0;
    let b = [boxes[[q, 0]], boxes[[q, 1]], boxes[[q, 2]], boxes[[q, 3]]];
    let l1: f64 = (0..4).map(|i| (b[i] - gt.boxes[0][i]).abs()).sum();
    let g = 1.0 - oracle_giou(b, gt.boxes[0]);
    assert!((lib.cls - cls).abs() < 1e-9);
    assert!((lib.l1 - l1).abs() < 1e-9);
    assert!((lib.giou - g).abs() < 1e-9);
    assert!((lib.total - (2.0 * cls + 5.0 * l1 + 2.0 * g)).abs() < 1e-9);
}

#[test]
fn degenerate_losses() {
    let w = LossWeights::default();
    let boxes = array![[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]];
    let gt = GroundTruth::new(vec![[0.3, 0.3, 0.2, 0.2]], vec![1]);
    let perfect = det(array![[0.0, 1.0], [0.0, 0.0]], boxes.clone());
    let m = hungarian_match(&pairwise_cost(&perfect, &gt, &w));
    let l = detection_loss(&perfect, &gt, &m, &w);
    assert!(l.cls < 1e-10 && l.l1 == 0.0 && l.giou.abs() < 1e-15);

    let empty = GroundTruth::default();
    let scores = array![[0.2, 0.4], [0.1, 0.3]];
    let d = det(scores.clone(), boxes);
    let m = hungarian_match(&pairwise_cost(&d, &empty, &w));
    assert!(m.pairs.is_empty());
    let l = detection_loss(&d, &empty, &m, &w);
    assert_eq!((l.l1, l.giou), (0.0, 0.0));
    let want = -scores.iter().map(|s: &f64| (1.0 - s).ln()).sum::<f64>() / 4.0;
    assert!((l.cls - want).abs() < 1e-12);
}

#[test]
fn output_gradients_match_finite_differences() {
    let w = LossWeights::default();
    let logits = array![[1.2, -0.7], [0.3, 2.1], [-1.5, 0.4]];
    let boxes = array![[0.52, 0.47, 0.33, 0.41], [0.31, 0.28, 0.22, 0.19], [0.72, 0.62, 0.27, 0.23]];
    let gt = GroundTruth::new(vec![[0.45, 0.5, 0.3, 0.4], [0.7, 0.65, 0.25, 0.2]], vec![0, 1]);
    let scores = logits.mapv(|z: f64| 1.0 / (1.0 + (-z).exp()));
    let m = hungarian_match(&pairwise_cost(&det(scores, boxes.clone()), &gt, &w));
    let g = detection_loss_from_logits("t", &logits, &boxes, &gt, &m, &w);
    let total = |l: &Array2<f64>, b: &Array2<f64>| detection_loss_from_logits("t", l, b, &gt, &m, &w).breakdown.total;
    let h = 1e-6;
    for idx in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)] {
        let (mut p, mut q) = (logits.clone(), logits.clone());
        p[idx] += h;
        q[idx] -= h;
        let num = (total(&p, &boxes) - total(&q, &boxes)) / (2.0 * h);
        assert!((num - g.d_logits[idx]).abs() <= 1e-3 * num.abs().max(1e-3));
    }
    for r in 0..3 {
        for c in 0..4 {
            let (mut p, mut q) = (boxes.clone(), boxes.clone());
            p[[r, c]] += h;
            q[[r, c]] -= h;
            let num = (total(&logits, &p) - total(&logits, &q)) / (2.0 * h);
            let ana = g.d_boxes[[r, c]];
            assert!((num - ana).abs() <= 1e-3 * num.abs().max(1e-3), "box {r},{c}: {num} vs {ana}");
        }
    }
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, GroundTruth)> {
    (1usize..6, 0usize..5, 1usize..4).prop_flat_map(|(k, n, m)| {
        (
            prop::collection::vec(0.01f64..0.99, k * m),
            prop::collection::vec((0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.4, 0.05f64..0.4), k),
            prop::collection::vec((0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.4, 0.05f64..0.4, 0..m), n),
        )
            .prop_map(move |(s, b, g)| {
                let scores = Array2::from_shape_vec((k, m), s).unwrap();
                let boxes = Array2::from_shape_fn((k, 4), |(i, c)| [b[i].0, b[i].1, b[i].2, b[i].3][c]);
                let gt = GroundTruth::new(
                    g.iter().map(|t| [t.0, t.1, t.2, t.3]).collect(),
                    g.iter().map(|t| t.4).collect(),
                );
                (scores, boxes, gt)
            })
    })
}

proptest! {
    #[test]
    fn losses_are_nonnegative_and_order_free((scores, boxes, gt) in instance(), rot in 0usize..5) {
        let w = LossWeights::default();
        let d = det(scores, boxes);
        let cost = pairwise_cost(&d, &gt, &w);
        let m = hungarian_match(&cost);
        let l = detection_loss(&d, &gt, &m, &w);
        prop_assert!(l.cls >= 0.0 && l.l1 >= 0.0 && l.giou >= 0.0);
        prop_assert!((l.total - (w.cls * l.cls + w.l1 * l.l1 + w.giou * l.giou)).abs() < 1e-12);

        let n = gt.len();
        let mut order: Vec<usize> = (0..n).collect();
        if n > 0 {
            order.rotate_left(rot % n);
        }
        let permuted = GroundTruth::new(order.iter().map(|&j| gt.boxes[j]).collect(), order.iter().map(|&j| gt.classes[j]).collect());
        let pc = pairwise_cost(&d, &permuted, &w);
        let pm = hungarian_match(&pc);
        prop_assert!((pm.total_cost(&pc) - m.total_cost(&cost)).abs() < 1e-9);
        let pl = detection_loss(&d, &permuted, &pm, &w);
        prop_assert!((pl.total - l.total).abs() < 1e-9);
    }
}
