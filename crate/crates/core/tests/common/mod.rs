#![allow(dead_code)]

use ndarray::{Array1, Array2};
use plaindet::semantic::{encode_labels, EmbeddingTable, LabelSpace, SyntheticEncoder};

pub const BIAS_LABELS: [&str; 8] = ["common", "cat", "dog", "car", "tree", "cup", "hat", "bus"];

/// Synthetic table where every class shares a bias direction and "common"
/// carries a much larger share of it.
pub fn bias_fixture() -> EmbeddingTable {
    let space = LabelSpace::new("bias", BIAS_LABELS.iter().map(|s| s.to_string()).collect()).unwrap();
    let enc = SyntheticEncoder::new(11).with_beta("common", 3.0);
    encode_labels(&space, &enc).unwrap()
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Plain-vector recomputation of the NULL-basis calibration.
pub fn oracle_calibrate(vectors: &[Vec<f64>], null: &[f64]) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|v| {
            let diff: Vec<f64> = v.iter().zip(null).map(|(a, b)| a - b).collect();
            let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            diff.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn oracle_cosines(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    vectors
        .iter()
        .map(|a| {
            vectors
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b)))
                .collect()
        })
        .collect()
}

pub fn oracle_mean_abs_off_diag(sim: &[Vec<f64>]) -> f64 {
    let m = sim.len();
    let mut total = 0.0;
    for (i, row) in sim.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                total += v.abs();
            }
        }
    }
    total / (m * (m - 1)) as f64
}

/// Minimum assignment cost by trying every injection of the smaller side.
pub fn brute_force_assignment(cost: &Array2<f64>) -> f64 {
    let (k, n) = cost.dim();
    let transpose = n > k;
    let (rows, cols) = if transpose { (n, k) } else { (k, n) };
    let at = |r: usize, c: usize| if transpose { cost[[c, r]] } else { cost[[r, c]] };
    // assign every column to a distinct row
    fn rec(col: usize, cols: usize, rows: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if col == cols {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..rows {
            if !used[r] {
                used[r] = true;
                best = best.min(at(r, col) + rec(col + 1, cols, rows, used, at));
                used[r] = false;
            }
        }
        best
    }
    rec(0, cols, rows, &mut vec![false; rows], &at)
}

pub fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn head(dataset_id: &str, names: &[&str], dim: usize) -> plaindet::semantic::CalibratedClassifier {
    let space = LabelSpace::new(dataset_id, names.iter().map(|s| s.to_string()).collect()).unwrap();
    let table = encode_labels(&space, &SyntheticEncoder::new(3).with_dim(dim)).unwrap();
    plaindet::semantic::calibrate(dataset_id, &table).unwrap()
}

/// Smooth pseudo-random H×W×3 image in [0,1].
pub fn image(h: usize, w: usize, seed: u64) -> ndarray::Array3<f64> {
    let s = seed as f64 + 1.0;
    ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let v = (0.37 * s * y as f64 + 0.61 * x as f64 * (c as f64 + 1.0) + 1.7 * s).sin();
        0.5 + 0.5 * v * (0.3 * s + c as f64).cos().abs()
    })
}

pub fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut acc = 0.0;
            for t in 0..a.ncols() {
                acc += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Dataset whose training images carry the given class lists; pixels are blank.
pub fn toy_dataset(id: &str, names: &[&str], images: &[Vec<usize>]) -> plaindet::data::DatasetSpec {
    use plaindet::data::{DatasetSpec, ImageRecord, SceneRecipe};
    use plaindet::detection::GroundTruth;
    let record = |classes: &Vec<usize>| ImageRecord {
        recipe: SceneRecipe {
            canvas: [32, 32],
            background: [0.0, 0.0, 0.0],
            primitives: Vec::new(),
            seed: 0,
        },
        annotations: GroundTruth::new(classes.iter().map(|_| [0.5, 0.5, 0.2, 0.2]).collect(), classes.clone()),
    };
    DatasetSpec {
        dataset_id: id.into(),
        label_space: LabelSpace::new(id, names.iter().map(|s| s.to_string()).collect()).unwrap(),
        train: images.iter().map(record).collect(),
        val: images.iter().take(1).map(record).collect(),
    }
}
