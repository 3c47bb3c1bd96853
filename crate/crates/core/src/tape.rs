//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Parameters are pulled in from a
//! [`ParamStore`] by id; constants (frozen classifiers, pixels, positional
//! codes) enter through [`Tape::input`] and never receive gradients.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// Component-wise max over rows, producing a single row.
    ColumnMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// A scalar computed outside the tape together with its local
    /// gradients with respect to each input.
    External(Vec<(Var, Array2<f64>)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Parameter gradients keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.get(&id)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|a| a / n);
            norms.push(n);
        }
        self.push(v, Op::NormalizeRows { x, norms })
    }

    pub fn column_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((1, xv.ncols()));
        let mut argmax = Vec::with_capacity(xv.ncols());
        for (j, col) in xv.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &val) in col.iter().enumerate() {
                if val > col[best] {
                    best = i;
                }
            }
            out[[0, j]] = col[best];
            argmax.push(best);
        }
        self.push(out, Op::ColumnMax { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.push(v, Op::GatherRows(x, rows.to_vec()))
    }

    /// Records a scalar whose gradients w.r.t. `inputs` were computed by the caller.
    pub fn external(&mut self, value: f64, local_grads: Vec<(Var, Array2<f64>)>) -> Var {
        for (v, g) in &local_grads {
            debug_assert_eq!(self.value(*v).dim(), g.dim());
        }
        self.push(Array2::from_elem((1, 1), value), Op::External(local_grads))
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv * yv * (1.0 - yv));
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let inner = yr.dot(&gr);
                        Zip::from(&mut dr)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = yv * (gv - inner));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gain_v;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, mut dxr) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let is = inv_std[r];
                        Zip::from(&mut dxr)
                            .and(&dh)
                            .and(&h)
                            .for_each(|o, &a, &b| *o = is / n * (n * a - sum_dh - b * sum_dh_h));
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    for (r, mut dxr) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = yr.dot(&gr);
                        let n = norms[r];
                        Zip::from(&mut dxr)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &yv, &gv| *o = (gv - yv * inner) / n);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ColumnMax { x, argmax } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        dx[[i, j]] += g[[0, j]];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *x, Array2::from_shape_vec(dim, flat).expect("reshape"));
                }
                Op::SliceCols(x, start) => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::GatherRows(x, rows) => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut target = dx.row_mut(r);
                        target += &g.row(k);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::External(locals) => {
                    let scalar = g[[0, 0]];
                    for (v, local) in locals {
                        acc(&mut grads, *v, local * scalar);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::array;

    /// Central differences on every entry of every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        let grads = tape.backward(out);
        let h = 1e-6;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(store.value(id).dim()));
            let dim = store.value(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.value(id)[[r, c]];
                    store.value_mut(id)[[r, c]] = orig + h;
                    let mut t1 = Tape::new();
                    let o1 = f(&mut t1, store);
                    let plus = t1.value(o1)[[0, 0]];
                    store.value_mut(id)[[r, c]] = orig - h;
                    let mut t2 = Tape::new();
                    let o2 = f(&mut t2, store);
                    let minus = t2.value(o2)[[0, 0]];
                    store.value_mut(id)[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let a = analytic[[r, c]];
                    assert!(
                        (a - numeric).abs() <= 1e-6 + 1e-5 * a.abs().max(numeric.abs()),
                        "{} [{r},{c}]: analytic {a} numeric {numeric}",
                        store.name(id)
                    );
                }
            }
        }
    }

    fn sum_all(tape: &mut Tape, v: Var) -> Var {
        let (r, c) = tape.value(v).dim();
        let ones_l = tape.input(Array2::ones((1, r)));
        let ones_r = tape.input(Array2::ones((c, 1)));
        let a = tape.matmul(ones_l, v);
        tape.matmul(a, ones_r)
    }

    fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
        // Non-uniform weights so that softmax/normalize gradients are non-trivial.
        let (r, c) = tape.value(v).dim();
        let w = Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64);
        let w = tape.input(w);
        let wt = tape.matmul_t(v, w);
        let ones_r = tape.input(Array2::ones((1, r)));
        let d = tape.matmul(ones_r, wt);
        let ones = tape.input(Array2::ones((r, 1)));
        tape.matmul(d, ones)
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("a", array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]]);
        s.insert("b", array![[0.2, 0.7], [-0.5, 0.3], [1.1, -0.8]]);
        s.insert("row", array![[0.05, -0.3, 0.6]]);
        s.insert("gain", array![[1.2, 0.8, -0.5]]);
        s
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut s = store();
        check(&mut s, |t, s| {
            let a = t.param(s, ParamId(0));
            let b = t.param(s, ParamId(1));
            let ab = t.matmul(a, b);
            let abt = t.matmul_t(ab, ab);
            let g = t.gelu(abt);
            weighted_sum(t, g)
        });
    }

    #[test]
    fn softmax_layernorm_gradients() {
        let mut s = store();
        check(&mut s, |t, s| {
            let a = t.param(s, ParamId(0));
            let row = t.param(s, ParamId(2));
            let gain = t.param(s, ParamId(3));
            let x = t.add_row(a, row);
            let ln = t.layer_norm(x, gain, row);
            let sm = t.softmax_rows(ln);
            let sg = t.sigmoid(sm);
            weighted_sum(t, sg)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut s = store();
        check(&mut s, |t, s| {
            let a = t.param(s, ParamId(0));
            let b = t.param(s, ParamId(1));
            let n = t.normalize_rows(b);
            let m = t.column_max(n);
            let r = t.reshape(a, 3, 2);
            let sl = t.slice_cols(r, 1, 1);
            let cat = t.concat_cols(&[r, sl]);
            let gat = t.gather_rows(cat, &[2, 0, 2]);
            let sc = t.scale(gat, 0.7);
            let x = weighted_sum(t, sc);
            let y = weighted_sum(t, m);
            let z = t.add(x, y);
            let ab = t.matmul(a, b);
            let w = sum_all(t, ab);
            t.add(z, w)
        });
    }

    #[test]
    fn external_scalar_scales_local_gradient() {
        let mut s = store();
        let mut t = Tape::new();
        let a = t.param(&s, ParamId(0));
        let local = Array2::from_elem((2, 3), 2.0);
        let e = t.external(5.0, vec![(a, local)]);
        let out = t.scale(e, 3.0);
        let g = t.backward(out);
        assert!(g.get(ParamId(0)).unwrap().iter().all(|&v| v == 6.0));
        s.value_mut(ParamId(0))[[0, 0]] = 0.0;
    }

    #[test]
    fn inputs_receive_no_gradient_entries() {
        let s = store();
        let mut t = Tape::new();
        let a = t.param(&s, ParamId(0));
        let frozen = t.input(array![[1.0], [2.0], [3.0]]);
        let y = t.matmul(a, frozen);
        let out = sum_all(&mut t, y);
        let g = t.backward(out);
        assert_eq!(g.by_param.len(), 1);
    }
}
