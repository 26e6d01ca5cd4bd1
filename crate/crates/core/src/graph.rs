//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value, so node indices are a topological order by
//! construction. [`Graph::backward`] consumes the graph, walks the nodes once
//! in reverse index order and returns the [`Gradients`] of every node that
//! depends on a leaf with `requires_grad`.
//!
//! Matrix operations work on rank-2 tensors `[rows, cols]`. Row-wise ops
//! (`layernorm`, `softmax_rows`) treat any tensor as `[numel / last, last]`.

use crate::error::{Error, Result};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, transpose_kernel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Slice { x: Var, row0: usize, col0: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    BatchNormTrain { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNormEval { x: Var, rstd: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm, for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidShape { shape: t.shape().to_vec(), reason: op }),
    }
}

fn rows_of_last(t: &Tensor) -> (usize, usize) {
    let d = *t.shape().last().expect("tensors have at least one dimension");
    (t.numel() / d, d)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn send(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Gradient buffer of `v`, created as zeros on first use.
fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}


/// Exact GELU, `x · Φ(x)` with Φ the standard normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op kernels produce consistent shapes")
    }

    /// Records a copy of `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Self::tensor(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned, non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = t.with_requires_grad(false);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul expects a matrix")?;
        let (k2, n) = dims2(self.value(b), "matmul expects a matrix")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Self::tensor(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt expects a matrix")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt expects a matrix")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Self::tensor(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims2(self.value(a), "add_bias expects a matrix")?;
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out = self.value(a).data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::tensor(shape, out), Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "transpose expects a matrix")?;
        let out = transpose_kernel(self.value(a).data(), r, c);
        Ok(self.push(Self::tensor(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec()).map_err(|_| {
            Error::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() }
        })?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NanInput { op: "softmax_rows" });
        }
        let (_, n) = rows_of_last(t);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= sum);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::SoftmaxRows(a), &[a]))
    }

    /// Normalizes each length-`d` vector along the last axis with population
    /// variance, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_of_last(t);
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::tensor(shape, out), Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::tensor(shape, out), Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against `B` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = match *t.shape() {
            [c] => (1, c),
            [b, c] => (b, c),
            _ => return Err(Error::InvalidShape { shape: t.shape().to_vec(), reason: "cross_entropy expects [B, C]" }),
        };
        if labels.len() != b {
            return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: t.shape().to_vec(), rhs: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::IndexOutOfRange { op: "cross_entropy", index: bad, size: c });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in t.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - row[label];
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Rectangular block `[row0..row0+rows, col0..col0+cols]` of a matrix.
    pub fn slice(&mut self, a: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice expects a matrix")?;
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(Error::IndexOutOfRange { op: "slice", index: (row0 + rows).max(col0 + cols), size: r.max(c) });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        Ok(self.push(Self::tensor(vec![rows, cols], out), Op::Slice { x: a, row0, col0 }, &[a]))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "select_rows expects a matrix")?;
        if rows.is_empty() {
            return Err(Error::contract("select_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange { op: "select_rows", index: bad, size: r });
        }
        let src = self.value(a).data();
        let out = rows.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        Ok(self.push(Self::tensor(vec![rows.len(), c], out), Op::SelectRows { x: a, rows: rows.to_vec() }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = dims2(self.value(first), "concat_rows expects matrices")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = dims2(self.value(p), "concat_rows expects matrices")?;
            if c2 != c {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: self.shape(first).to_vec(), rhs: self.shape(p).to_vec() });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Self::tensor(vec![rows, c], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (r, _) = dims2(self.value(first), "concat_cols expects matrices")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = dims2(self.value(p), "concat_cols expects matrices")?;
            if r2 != r {
                return Err(Error::ShapeMismatch { op: "concat_cols", lhs: self.shape(first).to_vec(), rhs: self.shape(p).to_vec() });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Self::tensor(vec![r, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Train-mode batch norm without affine: each column is normalized by its
    /// batch mean and biased batch variance.
    pub fn batchnorm_train(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c) = dims2(self.value(x), "batchnorm expects [B, C]")?;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = src
            .chunks(c)
            .flat_map(|row| (0..c).map(|j| (row[j] - mean[j]) * rstd[j]).collect::<Vec<_>>())
            .collect();
        let value = Self::tensor(vec![b, c], xhat.clone());
        let v = self.push(value, Op::BatchNormTrain { x, xhat, rstd }, &[x]);
        Ok((v, BatchStats { mean, var, count: b }))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c) = dims2(self.value(x), "batchnorm expects [B, C]")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch { op: "batchnorm_eval", lhs: self.shape(x).to_vec(), rhs: vec![mean.len()] });
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| (0..c).map(|j| (row[j] - mean[j]) * rstd[j]).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::BatchNormEval { x, rstd }, &[x]))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let [m, k] = self.nodes[a.0].value.shape() else { unreachable!() };
                let n = node.value.shape()[1];
                if needs(a) {
                    send(grads, a, matmul_nt_kernel(g, val(b), *m, n, *k));
                }
                if needs(b) {
                    send(grads, b, matmul_tn_kernel(val(a), g, *m, *k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                let [m, k] = self.nodes[a.0].value.shape() else { unreachable!() };
                let n = node.value.shape()[1];
                if needs(a) {
                    send(grads, a, matmul_kernel(g, val(b), *m, n, *k));
                }
                if needs(b) {
                    send(grads, b, matmul_tn_kernel(g, val(a), *m, n, *k));
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    send(grads, a, g.to_vec());
                }
                if needs(b) {
                    send(grads, b, g.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    send(grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if needs(b) {
                    send(grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddBias(a, bias) => {
                if needs(a) {
                    send(grads, a, g.to_vec());
                }
                if needs(bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let mut acc = vec![0.0; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    send(grads, bias, acc);
                }
            }
            &Op::Scale(a, s) => {
                if needs(a) {
                    send(grads, a, g.iter().map(|x| x * s).collect());
                }
            }
            &Op::Transpose(a) => {
                if needs(a) {
                    let [r, c] = self.nodes[a.0].value.shape() else { unreachable!() };
                    send(grads, a, transpose_kernel(g, *c, *r));
                }
            }
            &Op::Reshape(a) => {
                if needs(a) {
                    send(grads, a, g.to_vec());
                }
            }
            &Op::SoftmaxRows(a) => {
                if needs(a) {
                    let (_, n) = rows_of_last(&node.value);
                    let mut out = Vec::with_capacity(g.len());
                    for (y, gy) in node.value.data().chunks(n).zip(g.chunks(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        out.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                    }
                    send(grads, a, out);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                if needs(*gamma) {
                    let mut acc = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                    send(grads, *gamma, acc);
                }
                if needs(*beta) {
                    let mut acc = vec![0.0; d];
                    for gr in g.chunks(d) {
                        acc.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                    }
                    send(grads, *beta, acc);
                }
                if needs(*x) {
                    let mut out = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        out.extend(dh.iter().zip(hr).map(|(dhj, hj)| r * (dhj - mean_dh - hj * mean_dh_h)));
                    }
                    send(grads, *x, out);
                }
            }
            &Op::Gelu(a) => {
                if needs(a) {
                    let out = g
                        .iter()
                        .zip(val(a))
                        .map(|(gi, &x)| gi * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                        .collect();
                    send(grads, a, out);
                }
            }
            &Op::Relu(a) => {
                if needs(a) {
                    send(grads, a, g.iter().zip(val(a)).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect());
                }
            }
            &Op::Sum(a) => {
                if needs(a) {
                    send(grads, a, vec![g[0]; self.nodes[a.0].value.numel()]);
                }
            }
            &Op::Mean(a) => {
                if needs(a) {
                    let n = self.nodes[a.0].value.numel();
                    send(grads, a, vec![g[0] / n as f64; n]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut out: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        out[i * c + l] -= scale;
                    }
                    send(grads, *logits, out);
                }
            }
            &Op::Slice { x, row0, col0 } => {
                if needs(x) {
                    let [_, c] = self.nodes[x.0].value.shape() else { unreachable!() };
                    let [rows, cols] = node.value.shape() else { unreachable!() };
                    let out = grad_slot(grads, x, self.nodes[x.0].value.numel());
                    for i in 0..*rows {
                        let dst = (row0 + i) * c + col0;
                        out[dst..dst + cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if needs(*x) {
                    let c = node.value.shape()[1];
                    let out = grad_slot(grads, *x, self.nodes[x.0].value.numel());
                    for (i, &r) in rows.iter().enumerate() {
                        out[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if needs(p) {
                        send(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut col0 = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if needs(p) {
                        let mut out = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            out.extend_from_slice(&g[i * total + col0..i * total + col0 + w]);
                        }
                        send(grads, p, out);
                    }
                    col0 += w;
                }
            }
            Op::BatchNormTrain { x, xhat, rstd } => {
                if needs(*x) {
                    let c = rstd.len();
                    let b = g.len() / c;
                    let mut mean_g = vec![0.0; c];
                    let mut mean_gh = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            mean_g[j] += gr[j];
                            mean_gh[j] += gr[j] * hr[j];
                        }
                    }
                    mean_g.iter_mut().for_each(|v| *v /= b as f64);
                    mean_gh.iter_mut().for_each(|v| *v /= b as f64);
                    let mut out = Vec::with_capacity(g.len());
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            out.push(rstd[j] * (gr[j] - mean_g[j] - hr[j] * mean_gh[j]));
                        }
                    }
                    send(grads, *x, out);
                }
            }
            Op::BatchNormEval { x, rstd } => {
                if needs(*x) {
                    let c = rstd.len();
                    send(grads, *x, g.chunks(c).flat_map(|row| row.iter().zip(rstd).map(|(a, b)| a * b).collect::<Vec<_>>()).collect());
                }
            }
        }
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not depend on any differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s accumulator (no-op when frozen).
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_cancellation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let s = g.softmax_rows(a).unwrap();
        for &v in g.value(s).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let a = g.constant(Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let a = g.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let s = g.softmax_rows(a).unwrap();
        assert!(close(g.value(s).data()[0], 0.25, 1e-15));
        assert!(close(g.value(s).data()[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![0.0, f64::NAN]]).unwrap());
        assert!(matches!(g.softmax_rows(a), Err(Error::NanInput { .. })));
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layernorm(x, gamma, beta, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);

        let c = g.constant(Tensor::filled(&[4], 3.5));
        let gamma4 = g.constant(Tensor::ones(&[4]));
        let beta4 = g.constant(Tensor::zeros(&[4]));
        let y = g.layernorm(c, gamma4, beta4, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_normalizes_random_vector() {
        let mut rng = crate::rng::Rng::new(11);
        let data: Vec<f64> = (0..8).map(|_| rng.normal_with(3.0, 2.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![8], data).unwrap());
        let gamma = g.constant(Tensor::ones(&[8]));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layernorm(x, gamma, beta, 1e-6).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / 8.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!(close(gelu_scalar(1.0), 0.841_344_746_068_543, 1e-12));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        for c in [2usize, 5, 10] {
            let mut g = Graph::new();
            let l = g.constant(Tensor::zeros(&[1, c]));
            for label in 0..c {
                let ce = g.cross_entropy(l, &[label]).unwrap();
                assert!(close(g.value(ce).data()[0], (c as f64).ln(), 1e-14));
            }
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.cross_entropy(l, &[3]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn backward_sum_and_square() {
        let w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let wv = g.input(&w);
        let s = g.sum(wv);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let wv = g.input(&w);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        let half = g.mul_scalar(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(wv).unwrap(), w.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::zeros(&[2]).with_requires_grad(true);
        let mut g = Graph::new();
        let wv = g.input(&w);
        assert!(matches!(g.backward(wv), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let w = Tensor::ones(&[2, 2]).with_requires_grad(true);
        let frozen = Tensor::ones(&[2, 2]);
        let mut g = Graph::new();
        let wv = g.input(&w);
        let fv = g.input(&frozen);
        let p = g.matmul(wv, fv).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(fv).is_none());
        assert!(grads.get(wv).is_some());
    }

    #[test]
    fn two_backward_passes_double_the_grad() {
        let mut w = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap().with_requires_grad(true);
        for _ in 0..2 {
            let mut g = Graph::new();
            let wv = g.input(&w);
            let sq = g.mul(wv, wv).unwrap();
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            grads.accumulate_into(wv, &mut w).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[4.0 * 0.3, 4.0 * -0.7]);
    }

    #[test]
    fn batchnorm_train_zero_mean_columns() {
        let mut rng = crate::rng::Rng::new(5);
        let data: Vec<f64> = (0..4 * 6).map(|_| rng.normal_with(2.0, 3.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 6], data).unwrap());
        let (y, stats) = g.batchnorm_train(x, 1e-5).unwrap();
        assert_eq!(stats.count, 4);
        let out = g.value(y).data();
        for j in 0..6 {
            let m: f64 = (0..4).map(|i| out[i * 6 + j]).sum::<f64>() / 4.0;
            assert!(m.abs() <= 1e-9);
        }
    }
}
