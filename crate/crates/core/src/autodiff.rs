//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node, from which parameter gradients are
//! collected by [`Gradients::param_grads`].

use std::collections::HashMap;

use crate::tensor::{gemm, Mat};

/// Index of a trainable tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Log(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    MeanRows(Var),
    SumAll(Var),
    VStack(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Transpose(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used for sensitivity checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, false)
    }

    /// `aᵀ · b`
    pub fn tmatmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, true, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, true)
    }

    fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = gemm(self.value(a), ta, self.value(b), tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, g) in value.row_mut(i).iter_mut().zip(&rv) {
                *x *= g;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scaled(k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let ng = self.needs(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * sigmoid(v));
        let ng = self.needs(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Log(a), ng)
    }

    /// Softmax of each row (normalizes along the column axis).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Softmax of each column (normalizes along the row axis).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.value(a).transpose()).transpose();
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxCols(a), ng)
    }

    /// Zero-mean, unit-variance normalization of each row.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = src.shape();
        let mut value = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in value.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.needs(x);
        self.push(value, Op::NormalizeRows { x, inv_std }, ng)
    }

    /// Layer normalization over the feature axis with learnable gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let n = self.normalize_rows(x);
        let g = self.mul_row(n, gain);
        self.add_row(g, bias)
    }

    /// Mean over rows, producing `1 × C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let ng = self.needs(a);
        self.push(Mat::row_vector(out), Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::vstack(&mats);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::VStack(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_rows(start, end);
        let ng = self.needs(x);
        self.push(value, Op::SliceRows { x, start }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Mean squared difference of two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    // C = op(A)·op(B)
                    let da = match (ta, tb) {
                        (false, false) => gemm(g, false, bv, true),
                        (false, true) => gemm(g, false, bv, false),
                        (true, false) => gemm(bv, false, g, true),
                        (true, true) => gemm(bv, true, g, true),
                    };
                    acc(a, da, grads);
                }
                if self.needs(b) {
                    let db = match (ta, tb) {
                        (false, false) => gemm(av, true, g, false),
                        (false, true) => gemm(g, true, av, false),
                        (true, false) => gemm(av, false, g, false),
                        (true, true) => gemm(g, true, av, true),
                    };
                    acc(b, db, grads);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone(), grads);
                acc(b, g.clone(), grads);
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone(), grads);
                acc(b, g.scaled(-1.0), grads);
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    acc(a, g.zip_map(self.value(b), |x, y| x * y), grads);
                }
                if self.needs(b) {
                    acc(b, g.zip_map(self.value(a), |x, y| x * y), grads);
                }
            }
            &Op::AddRow(a, row) => {
                acc(a, g.clone(), grads);
                if self.needs(row) {
                    acc(row, column_sums(g), grads);
                }
            }
            &Op::MulRow(a, row) => {
                let rv = self.value(row);
                if self.needs(a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (x, s) in da.row_mut(i).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    acc(a, da, grads);
                }
                if self.needs(row) {
                    let prod = g.zip_map(self.value(a), |x, y| x * y);
                    acc(row, column_sums(&prod), grads);
                }
            }
            &Op::Scale(a, k) => acc(a, g.scaled(k), grads),
            &Op::AddScalar(a) => acc(a, g.clone(), grads),
            &Op::Relu(a) => {
                acc(a, g.zip_map(self.value(a), |gg, x| if x > 0.0 { gg } else { 0.0 }), grads)
            }
            &Op::Silu(a) => acc(
                a,
                g.zip_map(self.value(a), |gg, x| {
                    let s = sigmoid(x);
                    gg * (s + x * s * (1.0 - s))
                }),
                grads,
            ),
            &Op::Tanh(a) => acc(a, g.zip_map(&node.value, |gg, y| gg * (1.0 - y * y)), grads),
            &Op::Log(a) => acc(a, g.zip_map(self.value(a), |gg, x| gg / x), grads),
            &Op::SoftmaxRows(a) => acc(a, softmax_rows_backward(&node.value, g), grads),
            &Op::SoftmaxCols(a) => {
                let d = softmax_rows_backward(&node.value.transpose(), &g.transpose());
                acc(a, d.transpose(), grads)
            }
            Op::NormalizeRows { x, inv_std } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let gy = g.row(i);
                    let yr = y.row(i);
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, gg), yy) in dx.row_mut(i).iter_mut().zip(gy).zip(yr) {
                        *o = inv_std[i] * (gg - mg - yy * mgy);
                    }
                }
                acc(*x, dx, grads);
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let mut d = Mat::zeros(r, c);
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for (o, gg) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = gg * inv;
                    }
                }
                acc(a, d, grads);
            }
            &Op::SumAll(a) => {
                let (r, c) = self.shape(a);
                acc(a, Mat::filled(r, c, g.item()), grads);
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.needs(p) {
                        acc(p, g.slice_rows(start, start + rows), grads);
                    }
                    start += rows;
                }
            }
            &Op::SliceRows { x, start } => {
                let (r, c) = self.shape(x);
                let mut d = Mat::zeros(r, c);
                let cols = c;
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(x, d, grads);
            }
            &Op::Transpose(a) => acc(a, g.transpose(), grads),
        }
    }
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Sums gradients of every parameter leaf into a per-parameter vector.
    /// Parameters that did not take part in the computation get `None`.
    pub fn param_grads(&self, tape: &Tape, param_count: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = (0..param_count).map(|_| None).collect();
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[*id] {
                    Some(e) => e.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Adds `param_grads` into a dense accumulator, allocating zeros where needed.
pub fn accumulate_param_grads(dst: &mut [Mat], src: &[Option<Mat>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            d.add_assign(s);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Numerically stable softmax applied to each row.
pub fn softmax_rows(m: &Mat) -> Mat {
    let (r, c) = m.shape();
    let mut out = Mat::zeros(r, c);
    for i in 0..r {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let dst = out.row_mut(i);
        for (o, v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    out
}

fn softmax_rows_backward(y: &Mat, g: &Mat) -> Mat {
    let (r, c) = y.shape();
    let mut d = Mat::zeros(r, c);
    for i in 0..r {
        let yr = y.row(i);
        let gr = g.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, yy), gg) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = yy * (gg - dot);
        }
    }
    d
}
