//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] borrows frozen weights and the trainable [`ParamStore`]
//! without copying; only intermediate activations are owned. Calling
//! [`Graph::backward`] walks the tape once and returns gradients for every
//! node that depends on a trainable parameter or a grad-requiring input.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    MeanRows(Var),
    Dot(Var, Var),
    Cosine(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'a> Graph<'a> {
    /// A graph with no trainable parameters available.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed frozen tensor.
    pub fn constant(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    /// Owned frozen tensor.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// Owned tensor whose gradient is reported by [`Gradients::of`].
    pub fn input_with_grad(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    /// Trainable parameter; repeated requests for the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("graph was built without a parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let rv = r.data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Cow::Owned(value), Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "mul_scalar expects a 1x1 scalar");
        let value = self.value(a).scaled(sv.get(0, 0));
        let ng = self.needs(a) || self.needs(s);
        self.push(Cow::Owned(value), Op::MulScalar(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            let (xhat, _) = normalize_row(xv.row(i), eps);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = g[j] * xhat[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::SoftmaxRows(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Cow::Owned(Matrix::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                c0 += v.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        self.push(
            Cow::Owned(Matrix::from_vec(len, cols, data)),
            Op::SliceRows { x, start, len },
            ng,
        )
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        self.slice_rows(x, index, 1)
    }

    /// Column-wise mean over rows, producing `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows() as f64;
        let mut out = vec![0.0; xv.cols()];
        for i in 0..xv.rows() {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v / n;
            }
        }
        let ng = self.needs(x);
        self.push(Cow::Owned(Matrix::row_vector(out)), Op::MeanRows(x), ng)
    }

    /// Inner product of two same-shaped tensors, producing `1 × 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "dot shape mismatch");
        let value = dot(self.value(a).data(), self.value(b).data());
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(Matrix::scalar(value)), Op::Dot(a, b), ng)
    }

    /// Cosine similarity of two same-shaped tensors, producing `1 × 1`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::InputContract(format!(
                "cosine similarity of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (na, nb) = (av.frobenius_norm(), bv.frobenius_norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numeric(
                "cosine similarity with a zero-norm embedding".into(),
            ));
        }
        let value = dot(av.data(), bv.data()) / (na * nb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(Matrix::scalar(value)), Op::Cosine(a, b), ng))
    }

    /// Backpropagates the given output gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads, *v, g.clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.insert(id, g.clone());
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scaled(*s)),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).get(0, 0);
                if self.needs(*a) {
                    accumulate(grads, *a, g.scaled(sv));
                }
                if self.needs(*s) {
                    let ds = dot(g.data(), self.value(*a).data());
                    accumulate(grads, *s, Matrix::scalar(ds));
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                accumulate(grads, *a, Matrix::from_vec(x.rows(), x.cols(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dgamma = vec![0.0; xv.cols()];
                let mut dbeta = vec![0.0; xv.cols()];
                for i in 0..xv.rows() {
                    let (xhat, inv_std) = normalize_row(xv.row(i), *eps);
                    let gr = g.row(i);
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dot(&dxhat, &xhat) / n;
                    for j in 0..xv.cols() {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx.set(i, j, inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx));
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Matrix::row_vector(dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Matrix::row_vector(dbeta));
                }
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let s = dot(y, gr);
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = y[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let cols = g.cols();
                        let data = g.data()[r0 * cols..(r0 + rows) * cols].to_vec();
                        accumulate(grads, p, Matrix::from_vec(rows, cols, data));
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let mut part = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        accumulate(grads, p, part);
                    }
                    c0 += cols;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..*len {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *d = gv / n;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Dot(a, b) => {
                let gs = g.get(0, 0);
                if self.needs(*a) {
                    accumulate(grads, *a, self.value(*b).scaled(gs));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.value(*a).scaled(gs));
                }
            }
            Op::Cosine(a, b) => {
                let gs = g.get(0, 0);
                let c = out.get(0, 0);
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.frobenius_norm(), bv.frobenius_norm());
                let cos_grad = |x: &Matrix, nx: f64, y: &Matrix| {
                    let data = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&xi, &yi)| gs * (yi / (na * nb) - c * xi / (nx * nx)))
                        .collect();
                    Matrix::from_vec(x.rows(), x.cols(), data)
                };
                if self.needs(*a) {
                    accumulate(grads, *a, cos_grad(av, na, bv));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, cos_grad(bv, nb, av));
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
