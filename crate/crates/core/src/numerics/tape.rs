//! Reverse-mode gradient tape over a small, closed set of matrix operations.
//!
//! Every value is a [`Matrix`]. Scalars are `1x1` matrices and vectors are
//! single rows. Binary elementwise ops broadcast their right operand when it
//! is a `1xC` row or a `1x1` scalar.

use super::matrix::{dot, log_sum_exp, sigmoid, softmax, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Concat(Vec<Var>, Axis),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log { x: Var, lo: f64, hi: f64 },
    Mean(Var),
    Sum(Var),
    Cosine { a: Var, b: Var, a_norms: Vec<f64>, b_norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Option<Matrix> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be pulled back from a
/// scalar output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of the right shape if nothing flowed into it.
    pub fn get(&self, tape: &Tape, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, tape: &Tape, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn broadcast_ok(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && (b.cols() == a.cols() || b.cols() == 1))
}

#[inline]
fn bcast(b: &Matrix, r: usize, c: usize) -> f64 {
    match (b.rows(), b.cols()) {
        (1, 1) => b.data()[0],
        (1, _) => b.data()[c],
        _ => b.get(r, c),
    }
}

/// Sum a full-shape gradient down to the (possibly broadcast) shape of `b`.
fn reduce_to(g: &Matrix, b: &Matrix) -> Matrix {
    if g.shape() == b.shape() {
        return g.clone();
    }
    if b.cols() == 1 && b.rows() == 1 {
        return Matrix::scalar(g.sum());
    }
    let mut out = Matrix::zeros(1, b.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`. Vars past that point
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient is computed for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(broadcast_ok(va, vb), "add shape {:?} + {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + bcast(vb, r, c);
                out.set(r, c, v);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(broadcast_ok(va, vb), "mul shape {:?} * {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) * bcast(vb, r, c);
                out.set(r, c, v);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiply by a fixed scalar.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(Matrix::scalar(k));
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = match axis {
            Axis::Rows => {
                let cols = vals[0].cols();
                let mut data = Vec::new();
                for v in &vals {
                    assert_eq!(v.cols(), cols, "row concat width mismatch");
                    data.extend_from_slice(v.data());
                }
                Matrix::from_vec(data.len() / cols.max(1), cols, data)
            }
            Axis::Cols => {
                let rows = vals[0].rows();
                let cols: usize = vals.iter().map(|v| v.cols()).sum();
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    for v in &vals {
                        assert_eq!(v.rows(), rows, "column concat height mismatch");
                        out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                        off += v.cols();
                    }
                }
                out
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&softmax(v.row(r)));
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Natural log.
    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, f64::MIN_POSITIVE, f64::INFINITY)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi).ln());
        let rg = self.rg(a);
        self.push(out, Op::Log { x: a, lo, hi }, rg)
    }

    /// Mean of all entries, as a `1x1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sum of all entries, as a `1x1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Pairwise cosine similarity between the rows of `a` (n x d) and `b`
    /// (m x d), giving an n x m matrix.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::DimensionMismatch { expected: va.cols(), found: vb.cols() });
        }
        let norms = |m: &Matrix| -> Result<Vec<f64>> {
            (0..m.rows())
                .map(|r| {
                    let n = dot(m.row(r), m.row(r)).sqrt();
                    if n > 0.0 && n.is_finite() {
                        Ok(n)
                    } else {
                        Err(Error::DegenerateVector { row: r })
                    }
                })
                .collect()
        };
        let a_norms = norms(va)?;
        let b_norms = norms(vb)?;
        let mut out = va.matmul_nt(vb);
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j) / (a_norms[i] * b_norms[j]);
                out.set(i, j, v);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Cosine { a, b, a_norms, b_norms }, rg))
    }

    /// Per-row softmax cross-entropy `-log softmax(logits_i)[targets_i]`,
    /// returned as an n x 1 column.
    ///
    /// With a mask, row `i` normalizes only over entries where the mask is
    /// nonzero; the target entry must be unmasked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<Matrix>) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows(), targets.len(), "one target per logits row");
        if let Some(m) = &mask {
            assert_eq!(m.shape(), v.shape(), "mask shape");
        }
        let mut out = Matrix::zeros(v.rows(), 1);
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v.cols(), "target {t} out of range");
            let row: Vec<f64> = match &mask {
                Some(m) => {
                    assert!(m.get(r, t) != 0.0, "target entry masked out");
                    v.row(r)
                        .iter()
                        .zip(m.row(r))
                        .map(|(&x, &keep)| if keep != 0.0 { x } else { f64::NEG_INFINITY })
                        .collect()
                }
                None => v.row(r).to_vec(),
            };
            out.set(r, 0, log_sum_exp(&row) - v.get(r, t));
        }
        let rg = self.rg(logits);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), mask }, rg)
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        fn accum(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accum(&mut grads, *b, reduce_to(&g, self.value(*b)));
                    }
                    if self.rg(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        for r in 0..ga.rows() {
                            for c in 0..ga.cols() {
                                let v = ga.get(r, c) * bcast(vb, r, c);
                                ga.set(r, c, v);
                            }
                        }
                        accum(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut full = g.clone();
                        for (f, x) in full.data_mut().iter_mut().zip(va.data()) {
                            *f *= x;
                        }
                        accum(&mut grads, *b, reduce_to(&full, vb));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accum(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(*a) {
                        accum(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, g.matmul_tn(self.value(*a)));
                    }
                }
                Op::Concat(parts, axis) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        if self.rg(p) {
                            let piece = match axis {
                                Axis::Rows => Matrix::from_vec(pr, pc, g.data()[off * pc..(off + pr) * pc].to_vec()),
                                Axis::Cols => {
                                    let mut m = Matrix::zeros(pr, pc);
                                    for r in 0..pr {
                                        m.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                                    }
                                    m
                                }
                            };
                            accum(&mut grads, p, piece);
                        }
                        off += match axis {
                            Axis::Rows => pr,
                            Axis::Cols => pc,
                        };
                    }
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (d, &t) in ga.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - t * t;
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (d, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (d, &s) in ga.data_mut().iter_mut().zip(y.data()) {
                        *d *= s * (1.0 - s);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Log { x, lo, hi } => {
                    let mut ga = g;
                    for (d, &v) in ga.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d = if v >= *lo && v <= *hi { *d / v } else { 0.0 };
                    }
                    accum(&mut grads, *x, ga);
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let k = g.data()[0] / va.len() as f64;
                    accum(&mut grads, *a, Matrix::filled(va.rows(), va.cols(), k));
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    accum(&mut grads, *a, Matrix::filled(va.rows(), va.cols(), g.data()[0]));
                }
                Op::Cosine { a, b, a_norms, b_norms } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let d = va.cols();
                    if self.rg(*a) {
                        let mut ga = Matrix::zeros(va.rows(), d);
                        for i in 0..va.rows() {
                            let ai = va.row(i);
                            let out = ga.row_mut(i);
                            for j in 0..vb.rows() {
                                let gij = g.get(i, j);
                                if gij == 0.0 {
                                    continue;
                                }
                                let s = y.get(i, j);
                                let inv = 1.0 / (a_norms[i] * b_norms[j]);
                                let self_term = s / (a_norms[i] * a_norms[i]);
                                for (k, o) in out.iter_mut().enumerate() {
                                    *o += gij * (vb.get(j, k) * inv - self_term * ai[k]);
                                }
                            }
                        }
                        accum(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Matrix::zeros(vb.rows(), d);
                        for j in 0..vb.rows() {
                            let bj = vb.row(j).to_vec();
                            let out = gb.row_mut(j);
                            for i in 0..va.rows() {
                                let gij = g.get(i, j);
                                if gij == 0.0 {
                                    continue;
                                }
                                let s = y.get(i, j);
                                let inv = 1.0 / (a_norms[i] * b_norms[j]);
                                let self_term = s / (b_norms[j] * b_norms[j]);
                                for (k, o) in out.iter_mut().enumerate() {
                                    *o += gij * (va.get(i, k) * inv - self_term * bj[k]);
                                }
                            }
                        }
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    let v = self.value(*logits);
                    let mut gl = Matrix::zeros(v.rows(), v.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g.get(r, 0);
                        let row: Vec<f64> = match mask {
                            Some(m) => v
                                .row(r)
                                .iter()
                                .zip(m.row(r))
                                .map(|(&x, &keep)| if keep != 0.0 { x } else { f64::NEG_INFINITY })
                                .collect(),
                            None => v.row(r).to_vec(),
                        };
                        let p = softmax(&row);
                        let out = gl.row_mut(r);
                        for (c, o) in out.iter_mut().enumerate() {
                            let ind = if c == t { 1.0 } else { 0.0 };
                            *o = gr * (p[c] - ind);
                        }
                    }
                    accum(&mut grads, *logits, gl);
                }
            }
        }
        Gradients { grads }
    }
}
