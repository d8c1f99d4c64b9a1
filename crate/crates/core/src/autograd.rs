//! Reverse-mode automatic differentiation over [`Tensor`] matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! and [`Graph::backward`] walks the tape in reverse. Graphs are built fresh
//! for every forward pass and never shared between threads.
//!
//! Detached nodes cut the tape. When a graph is created with
//! [`Graph::replaying`], detached nodes take their values from the replay list
//! instead of from their source, which gives finite-difference checks the
//! same stop-gradient semantics as the analytic pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask, `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allow: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Silu(Var),
    Tanh(Var),
    Softmax(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    Abs(Var),
    RowNorm(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    detached: Vec<Tensor>,
    replay: Option<Rc<Vec<Tensor>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), detached: Vec::new(), replay: None }
    }

    /// A graph whose detached nodes reproduce `values` in creation order.
    pub fn replaying(values: Rc<Vec<Tensor>>) -> Self {
        Self { replay: Some(values), ..Self::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn uses_param(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let idx = self.detached.len();
        let value = match &self.replay {
            Some(list) => list
                .get(idx)
                .cloned()
                .unwrap_or_else(|| panic!("replay list has no entry for detached node {idx}")),
            None => self.value(x).clone(),
        };
        assert_eq!(value.shape(), self.shape(x), "replayed detached value has the wrong shape");
        self.detached.push(value.clone());
        self.push(value, Op::Leaf)
    }

    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.clone()
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Tensor::matmul_t(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Multiplies every entry of `a` by the `1×1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Row-wise softmax. Disallowed entries get probability exactly 0; a row
    /// with no allowed entry is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if let Some(m) = mask {
            assert_eq!((m.rows, m.cols), (rows, cols), "mask shape does not match scores");
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let allowed = |c: usize| mask.is_none_or(|m| m.get(r, c));
            let xr = x.row(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in xr.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (xr[c] - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = x.row(r);
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let ir = 1.0 / (ms + eps).sqrt();
            inv.push(ir);
            for (o, v) in out.row_mut(r).iter_mut().zip(xr) {
                *o = v * ir;
            }
        }
        self.push(out, Op::RmsNorm { x: a, inv_rms: inv })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&values);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "column slice out of bounds");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let mut out = Tensor::zeros(idx.len(), v.cols());
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(v.row(j));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ_t w_t · −log softmax(logits_t)[target_t]` as a `1×1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per logits row");
        assert_eq!(targets.len(), weights.len(), "one weight per target");
        let mut probs = Tensor::zeros(x.rows(), x.cols());
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let xr = x.row(r);
            let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = xr.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, v) in probs.row_mut(r).iter_mut().zip(xr) {
                *p = (v - log_z).exp();
            }
            if w != 0.0 {
                loss += w * (log_z - xr[t]);
            }
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        self.push(Tensor::scalar(loss), op)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    /// Same row-major data viewed as `rows×cols`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = Tensor::from_vec(rows, cols, self.value(x).data().to_vec());
        self.push(value, Op::Reshape(x))
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows()).map(|r| v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
        let value = Tensor::from_vec(v.rows(), 1, data);
        self.push(value, Op::RowNorm(x))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, v)| grads.get(v.0).and_then(Clone::clone).map(|g| (id, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let da = if ta { Tensor::matmul_t(bv, tb, g, true) } else { Tensor::matmul_t(g, false, bv, !tb) };
                let db = if tb { Tensor::matmul_t(g, true, av, ta) } else { Tensor::matmul_t(av, !ta, g, false) };
                accumulate(grads, a, da);
                accumulate(grads, b, db);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
            }
            &Op::AddRow(a, row) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, row, column_sums(g));
            }
            &Op::MulRow(a, row) => {
                let rv = val(row);
                accumulate(grads, a, broadcast_row(g, rv, |x, y| x * y));
                accumulate(grads, row, column_sums(&g.zip_map(val(a), |x, y| x * y)));
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scale(s)),
            &Op::MulScalar(a, s) => {
                let k = val(s).item();
                accumulate(grads, a, g.scale(k));
                let ds = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                accumulate(grads, s, Tensor::scalar(ds));
            }
            &Op::Silu(a) => {
                let d = g.zip_map(val(a), |gy, x| {
                    let s = sigmoid(x);
                    gy * (s + x * s * (1.0 - s))
                });
                accumulate(grads, a, d);
            }
            &Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                accumulate(grads, a, g.zip_map(y, |gy, t| gy * (1.0 - t * t)));
            }
            &Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &p) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = p * (gy - dot);
                    }
                }
                accumulate(grads, a, d);
            }
            Op::RmsNorm { x, inv_rms } => {
                let xv = val(*x);
                let n = xv.cols() as f64;
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let ir = inv_rms[r];
                    let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    let k = ir * ir * ir / n * dot;
                    for ((o, &gy), &xx) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                        *o = ir * gy - k * xx;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    accumulate(grads, p, g.slice_rows(off, rows));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    accumulate(grads, p, d);
                    off += cols;
                }
            }
            &Op::Reshape(x) => {
                let (rows, cols) = val(x).shape();
                accumulate(grads, x, Tensor::from_vec(rows, cols, g.data().to_vec()));
            }
            &Op::SliceRows { x, start } => {
                let (rows, cols) = val(x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, x, d);
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = val(x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, x, d);
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = val(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for (i, &j) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, d);
            }
            &Op::SumAll(x) => {
                let (rows, cols) = val(x).shape();
                accumulate(grads, x, Tensor::filled(rows, cols, g.item()));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let gy = g.item();
                let mut d = Tensor::zeros(probs.rows(), probs.cols());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = gy * w * p;
                    }
                    let v = d.get(r, t) - gy * w;
                    d.set(r, t, v);
                }
                accumulate(grads, *logits, d);
            }
            &Op::Abs(x) => {
                let d = g.zip_map(val(x), |gy, v| {
                    if v > 0.0 {
                        gy
                    } else if v < 0.0 {
                        -gy
                    } else {
                        0.0
                    }
                });
                accumulate(grads, x, d);
            }
            &Op::RowNorm(x) => {
                let xv = val(x);
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = y.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let k = g.get(r, 0) / n;
                    for (o, &v) in d.row_mut(r).iter_mut().zip(xv.row(r)) {
                        *o = k * v;
                    }
                }
                accumulate(grads, x, d);
            }
        }
    }
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// `None` when the parameter did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn broadcast_row(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast width mismatch");
    let mut out = a.clone();
    for r in 0..a.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.row(0)) {
            *o = f(*o, b);
        }
    }
    out
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences on a leaf, recomputing the whole expression.
    fn fd_check(build: impl Fn(&mut Graph, Tensor) -> Var, x0: Tensor) {
        // `build` must create the input as the graph's first node.
        let mut g = Graph::new();
        let y = build(&mut g, x0.clone());
        let grads = g.backward(y);
        let analytic = grads.var(Var(0)).cloned().unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
        let eps = 1e-6;
        for k in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[k] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[k] -= eps;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let y = build(&mut g, t);
                g.value(y).item()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            let an = analytic.data()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {k}: fd {fd} vs analytic {an}");
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_and_transposes_gradients() {
        let w = rand(4, 3, 1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let w = if tb { w.transpose() } else { w.clone() };
            fd_check(
                move |g, x| {
                    let x = g.constant(x);
                    let w = g.constant(w.clone());
                    let y = g.matmul_t(x, ta, w, tb);
                    let y = g.tanh(y);
                    g.sum(y)
                },
                if ta { rand(4, 2, 2) } else { rand(2, 4, 2) },
            );
            fd_check(
                move |g, x| {
                    let w = g.constant(x);
                    let a = g.constant(if ta { rand(4, 2, 8) } else { rand(2, 4, 8) });
                    let y = g.matmul_t(a, ta, w, tb);
                    let y = g.tanh(y);
                    g.sum(y)
                },
                if tb { rand(3, 4, 4) } else { rand(4, 3, 4) },
            );
        }
    }

    #[test]
    fn softmax_rmsnorm_silu_gradients() {
        let mask = Mask::from_fn(3, 4, |r, c| c <= r + 1);
        let w = rand(3, 4, 9);
        fd_check(
            move |g, x| {
                let x = g.constant(x);
                let n = g.rms_norm(x, 1e-6);
                let s = g.silu(n);
                let p = g.softmax(s, Some(&mask));
                let w = g.constant(w.clone());
                let y = g.mul(p, w);
                g.sum(y)
            },
            rand(3, 4, 3),
        );
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        fd_check(
            |g, x| {
                let x = g.constant(x);
                g.cross_entropy(x, &[1, 0, 3], &[0.5, 0.0, 1.5])
            },
            rand(3, 4, 4),
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 4));
        let l = g.cross_entropy(x, &[2], &[1.0]);
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn structural_ops_gradients() {
        let row = rand(1, 3, 5);
        fd_check(
            move |g, x| {
                let x = g.constant(x);
                let r = g.constant(row.clone());
                let a = g.slice_rows(x, 1, 2);
                let b = g.slice_cols(x, 0, 3);
                let c = g.gather_rows(b, &[0, 0, 2]);
                let c = g.mul_row(c, r);
                let c = g.add_row(c, r);
                let d = g.concat_rows(&[a, c]);
                let e = g.concat_cols(&[d, d]);
                let e = g.reshape(e, 10, 3);
                let n = g.row_norm(e);
                let s = g.slice_rows(x, 0, 1);
                let s = g.slice_cols(s, 0, 1);
                let m = g.mul_scalar(n, s);
                let ab = g.abs(m);
                g.sum(ab)
            },
            rand(3, 3, 6),
        );
    }

    #[test]
    fn masked_softmax_has_exact_zeros() {
        let mut g = Graph::new();
        let x = g.constant(rand(2, 3, 7));
        let m = Mask::from_fn(2, 3, |_, c| c != 1);
        let p = g.softmax(x, Some(&m));
        assert_eq!(g.value(p).get(0, 1), 0.0);
        assert_eq!(g.value(p).get(1, 1), 0.0);
        let s: f64 = g.value(p).row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn detach_stops_gradient_and_replays() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let d = g.detach(wv);
        let y = g.mul(wv, d);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap().item(), 3.0);

        let frozen = Rc::new(g.detached_values());
        store.set(w, Tensor::scalar(5.0));
        let mut g2 = Graph::replaying(frozen);
        let wv = g2.param(&store, w);
        let d = g2.detach(wv);
        let y = g2.mul(wv, d);
        assert_eq!(g2.value(y).item(), 15.0);
    }
}
