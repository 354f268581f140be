//! Dense f64 tensors and a small reverse-mode tape.
//!
//! Each primitive has a value-level function (plain slices in, `Vec` out) and
//! a tape method that records it for the backward pass. Every primitive
//! checks its output for NaN/Inf.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance used when checking that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    /// Row-major (rows, cols).
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor {
            shape: Shape::Matrix(rows, cols),
            data,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        match shape {
            Shape::Vector(n) if n == data.len() => Ok(Tensor::vector(data)),
            Shape::Vector(n) => Err(Error::shape("tensor", format!("vector of {n}, got {}", data.len()))),
            Shape::Matrix(r, c) => Tensor::matrix(r, c, data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape {
            Shape::Vector(n) => n,
            Shape::Matrix(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape {
            Shape::Vector(_) => 1,
            Shape::Matrix(_, c) => c,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        let cols = self.cols();
        (0..self.rows()).map(|r| self.data[r * cols + col]).collect()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        matvec(self, v)
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { op })
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape {
        Shape::Matrix(r, c) => Ok((r, c)),
        Shape::Vector(n) => Err(Error::shape(op, format!("expected a matrix, got a vector of {n}"))),
    }
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if p.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL || !sum.is_finite() {
        return Err(Error::NotOnSimplex { sum, min });
    }
    Ok(())
}

/// `W x + b` for a row-major `m x n` weight.
pub fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = expect_matrix("affine", w)?;
    if x.len() != n || b.len() != m {
        return Err(Error::shape(
            "affine",
            format!("W is {m}x{n}, x has {}, b has {}", x.len(), b.len()),
        ));
    }
    let out: Vec<f64> = w
        .data
        .chunks_exact(n)
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect();
    check_finite("affine", &out)?;
    Ok(out)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite("softmax", z)?;
    if z.is_empty() {
        return Err(Error::shape("softmax", "empty input"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    check_finite("softmax", &out)?;
    Ok(out)
}

/// Softmax applied independently to every column.
pub fn column_softmax(z: &Tensor) -> Result<Tensor> {
    let (rows, cols) = expect_matrix("column_softmax", z)?;
    check_finite("column_softmax", &z.data)?;
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let col = softmax(&z.column(c))?;
        for (r, v) in col.into_iter().enumerate() {
            out[r * cols + c] = v;
        }
    }
    Tensor::matrix(rows, cols, out)
}

pub fn matvec(m: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = expect_matrix("matvec", m)?;
    if v.len() != cols {
        return Err(Error::shape("matvec", format!("{rows}x{cols} times {}", v.len())));
    }
    let out: Vec<f64> = m
        .data
        .chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();
    check_finite("matvec", &out)?;
    Ok(out)
}

/// `-log max(p[label], eps)` for a probability vector.
pub fn cross_entropy_index(p: &[f64], label: usize) -> Result<f64> {
    check_simplex(p)?;
    if label >= p.len() {
        return Err(Error::NotOneHot);
    }
    Ok(-p[label].max(LOG_EPS).ln())
}

/// Cross-entropy between a probability vector and a one-hot target.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape("cross_entropy", format!("{} vs {}", p.len(), y.len())));
    }
    let label = one_hot_index(y)?;
    cross_entropy_index(p, label)
}

pub fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut label = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 && label.is_none() {
            label = Some(i);
        } else if v != 0.0 {
            return Err(Error::NotOneHot);
        }
    }
    label.ok_or(Error::NotOneHot)
}

/// Cross-entropy straight from logits via log-sum-exp.
pub fn cross_entropy_from_logits(z: &[f64], label: usize) -> Result<f64> {
    check_finite("cross_entropy_from_logits", z)?;
    if label >= z.len() {
        return Err(Error::NotOneHot);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

/// `sum p_i log p_i` with the log clamped at [`LOG_EPS`]; exact zeros contribute 0.
pub fn neg_entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(neg_entropy_unchecked(p))
}

fn neg_entropy_unchecked(p: &[f64]) -> f64 {
    p.iter().map(|&v| v * v.max(LOG_EPS).ln()).sum()
}

/// Mean over columns of each column's negative entropy.
pub fn column_neg_entropy_mean(t: &Tensor) -> Result<f64> {
    let (_, cols) = expect_matrix("column_neg_entropy_mean", t)?;
    let mut total = 0.0;
    for c in 0..cols {
        total += neg_entropy(&t.column(c))?;
    }
    Ok(total / cols as f64)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    ColumnSoftmax(Var),
    Reshape(Var),
    Slice { x: Var, start: usize },
    MatVec { m: Var, v: Var },
    CrossEntropy { p: Var, label: usize },
    NegEntropy(Var),
    ColumnNegEntropyMean(Var),
    Sum(Vec<Var>),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of `var`, zeros when it did not influence the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_shape(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = affine(self.value(x).data(), self.value(w), self.value(b).data())?;
        let rg = self.grad_any(&[x, w, b]);
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = relu(self.value(x).data());
        let rg = self.grad_any(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Relu(x), rg))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let out = softmax(self.value(z).data())?;
        let rg = self.grad_any(&[z]);
        Ok(self.push(Tensor::vector(out), Op::Softmax(z), rg))
    }

    pub fn column_softmax(&mut self, z: Var) -> Result<Var> {
        let out = column_softmax(self.value(z))?;
        let rg = self.grad_any(&[z]);
        Ok(self.push(out, Op::ColumnSoftmax(z), rg))
    }

    /// Reinterprets a vector as a row-major `rows x cols` matrix.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = Tensor::matrix(rows, cols, self.value(x).data().to_vec())?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x).data();
        if start + len > src.len() {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of {}", start + len, src.len()),
            ));
        }
        let out = src[start..start + len].to_vec();
        let rg = self.grad_any(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Slice { x, start }, rg))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = matvec(self.value(m), self.value(v).data())?;
        let rg = self.grad_any(&[m, v]);
        Ok(self.push(Tensor::vector(out), Op::MatVec { m, v }, rg))
    }

    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let out = cross_entropy_index(self.value(p).data(), label)?;
        let rg = self.grad_any(&[p]);
        Ok(self.push(Tensor::scalar(out), Op::CrossEntropy { p, label }, rg))
    }

    pub fn neg_entropy(&mut self, p: Var) -> Result<Var> {
        let out = neg_entropy(self.value(p).data())?;
        let rg = self.grad_any(&[p]);
        Ok(self.push(Tensor::scalar(out), Op::NegEntropy(p), rg))
    }

    pub fn column_neg_entropy_mean(&mut self, t: Var) -> Result<Var> {
        let out = column_neg_entropy_mean(self.value(t))?;
        let rg = self.grad_any(&[t]);
        Ok(self.push(Tensor::scalar(out), Op::ColumnNegEntropyMean(t), rg))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::shape("sum", format!("term of length {}", v.len())));
            }
            total += v.item();
        }
        check_finite("sum", &[total])?;
        let rg = self.grad_any(terms);
        Ok(self.push(Tensor::scalar(total), Op::Sum(terms.to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &out)?;
        let out = Tensor::from_shape(src.shape(), out)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Affine { x, w, b } => {
                let xv = val(x).data();
                let wv = val(w);
                let n = xv.len();
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], n);
                    for (row, &gi) in wv.data().chunks_exact(n).zip(g) {
                        for (d, &wij) in dx.iter_mut().zip(row) {
                            *d += gi * wij;
                        }
                    }
                }
                if wants(w) {
                    let dw = accumulate(&mut grads[w.0], wv.len());
                    for (row, &gi) in dw.chunks_exact_mut(n).zip(g) {
                        for (d, &xj) in row.iter_mut().zip(xv) {
                            *d += gi * xj;
                        }
                    }
                }
                if wants(b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let xv = val(x).data();
                    let dx = accumulate(&mut grads[x.0], xv.len());
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Softmax(z) => {
                if wants(z) {
                    let s = node.value.data();
                    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                    let dz = accumulate(&mut grads[z.0], s.len());
                    for ((d, &si), &gi) in dz.iter_mut().zip(s).zip(g) {
                        *d += si * (gi - dot);
                    }
                }
            }
            &Op::ColumnSoftmax(z) => {
                if wants(z) {
                    let s = &node.value;
                    let (rows, cols) = (s.rows(), s.cols());
                    let sd = s.data();
                    let dz = accumulate(&mut grads[z.0], sd.len());
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| sd[r * cols + c] * g[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            dz[i] += sd[i] * (g[i] - dot);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            &Op::Slice { x, start } => {
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], val(x).len());
                    dx[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            &Op::MatVec { m, v } => {
                let mv = val(m);
                let vv = val(v).data();
                let cols = vv.len();
                if wants(m) {
                    let dm = accumulate(&mut grads[m.0], mv.len());
                    for (row, &gi) in dm.chunks_exact_mut(cols).zip(g) {
                        for (d, &vj) in row.iter_mut().zip(vv) {
                            *d += gi * vj;
                        }
                    }
                }
                if wants(v) {
                    let dv = accumulate(&mut grads[v.0], cols);
                    for (row, &gi) in mv.data().chunks_exact(cols).zip(g) {
                        for (d, &mij) in dv.iter_mut().zip(row) {
                            *d += gi * mij;
                        }
                    }
                }
            }
            &Op::CrossEntropy { p, label } => {
                if wants(p) {
                    let pv = val(p).data();
                    let dp = accumulate(&mut grads[p.0], pv.len());
                    if pv[label] > LOG_EPS {
                        dp[label] -= g[0] / pv[label];
                    }
                }
            }
            &Op::NegEntropy(p) => {
                if wants(p) {
                    let pv = val(p).data();
                    let dp = accumulate(&mut grads[p.0], pv.len());
                    for (d, &pi) in dp.iter_mut().zip(pv) {
                        *d += g[0] * neg_entropy_partial(pi);
                    }
                }
            }
            &Op::ColumnNegEntropyMean(t) => {
                if wants(t) {
                    let tv = val(t);
                    let scale = g[0] / tv.cols() as f64;
                    let dt = accumulate(&mut grads[t.0], tv.len());
                    for (d, &ti) in dt.iter_mut().zip(tv.data()) {
                        *d += scale * neg_entropy_partial(ti);
                    }
                }
            }
            Op::Sum(terms) => {
                for &t in terms {
                    if wants(t) {
                        accumulate(&mut grads[t.0], 1)[0] += g[0];
                    }
                }
            }
            &Op::Scale(x, factor) => {
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
                }
            }
        }
    }
}

/// d/dp of `p log max(p, eps)`.
fn neg_entropy_partial(p: f64) -> f64 {
    if p > LOG_EPS {
        p.ln() + 1.0
    } else {
        LOG_EPS.ln()
    }
}
