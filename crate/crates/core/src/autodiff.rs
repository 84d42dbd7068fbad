//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; a node only ever refers to
//! earlier nodes, so the insertion order is a topological order and the
//! backward pass is a single reverse sweep. A tape can be differentiated once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, sigmoid, softmax_rows_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<Option<usize>> },
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Named parameter tensors, each carrying a gradient buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a parameter; gradient tracking is switched on.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        if !t.requires_grad() {
            t.set_requires_grad(true);
        }
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Recorded computation. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Constant, false)
    }

    /// Unbound leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Variable, true)
    }

    /// Leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let mut t = store.get(name)?.clone();
        t.set_requires_grad(false);
        Ok(self.push(t, Op::Param(name.to_string()), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn check_row_vec(&self, x: Var, row: Var) -> Result<(usize, usize)> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.numel() != xv.cols() {
            return Err(Error::dim(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        Ok((xv.rows(), xv.cols()))
    }

    /// `x[i, j] + b[j]` for a `[1 x n]` (or `[n]`) bias.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.check_row_vec(x, b)?;
        let (xv, bv) = (self.value(x).data(), self.value(b).data());
        let data = (0..r * c).map(|i| xv[i] + bv[i % c]).collect();
        let out = Tensor::matrix(r, c, data)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    /// `x[i, j] * w[j]` for a `[1 x n]` (or `[n]`) scale.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.check_row_vec(x, w)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let data = (0..r * c).map(|i| xv[i] * wv[i % c]).collect();
        let out = Tensor::matrix(r, c, data)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::MulRow(x, w), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let out = Tensor::matrix(r, c, softmax_rows_raw(xv.data(), r, c))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`; no affine part.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::matrix(r, c, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::LayerNormRows { x, inv_std }, ng))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::dim(format!(
                    "concat_cols row mismatch: {} vs {}",
                    self.value(p).rows(),
                    r
                )));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Row gather; `None` produces a zero row that receives no gradient.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            match i {
                Some(i) if i >= xv.rows() => {
                    return Err(Error::Index {
                        index: i,
                        size: xv.rows(),
                    })
                }
                Some(i) => data.extend_from_slice(xv.row_slice(i)),
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let idx: Vec<_> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows(x, &idx)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Euclidean norm of each row, `[m x n] -> [m x 1]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|i| xv.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect::<Vec<_>>();
        let out = Tensor::matrix(xv.rows(), 1, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::RowNorms(x), ng))
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r || r == 0 {
            return Err(Error::dim(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: t, size: c });
        }
        let probs = softmax_rows_raw(lv.data(), r, c);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let out = Tensor::scalar(loss / r as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() || targets.is_empty() {
            return Err(Error::dim(format!(
                "{} targets for {} logits",
                targets.len(),
                lv.numel()
            )));
        }
        let loss = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Differentiates the scalar `loss` with respect to every recorded node.
    ///
    /// A tape can only be differentiated once; a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        let mut out = Vec::with_capacity(n);
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            if let Op::Param(name) = &node.op {
                params.push((i, name.clone()));
            }
            out.push(match g {
                Some(g) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                None => None,
            });
        }
        Ok(Gradients { grads: out, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let bt = bv.transpose();
                    let da = matmul_raw(g, bt.data(), m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.needs(*b) {
                    let at = av.transpose();
                    let db = matmul_raw(at.data(), g, k, m, n);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    self.acc(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g);
                if self.needs(*b) {
                    let c = y.cols();
                    let mut db = vec![0.0; c];
                    for (k, gv) in g.iter().enumerate() {
                        db[k % c] += gv;
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::MulRow(x, w) => {
                let c = y.cols();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*x) {
                    let dx: Vec<f64> = g.iter().enumerate().map(|(k, gv)| gv * wv[k % c]).collect();
                    self.acc(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; c];
                    for (k, gv) in g.iter().enumerate() {
                        dw[k % c] += gv * xv[k];
                    }
                    self.acc(grads, *w, &dw);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(grads, *x, &dx);
            }
            Op::AddScalar(x) => self.acc(grads, *x, g),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Transpose(x) => {
                let gt = Tensor::matrix(y.rows(), y.cols(), g.to_vec())
                    .expect("gradient shape")
                    .transpose();
                self.acc(grads, *x, gt.data());
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = (y.rows(), y.cols());
                let yv = y.data();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let dot: f64 = g[s.clone()].iter().zip(&yv[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        dx[k] = yv[k] * (g[k] - dot);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (r, c) = (y.rows(), y.cols());
                let yv = y.data();
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let gsum: f64 = g[s.clone()].iter().sum();
                    let gy: f64 = g[s.clone()].iter().zip(&yv[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        dx[k] = inv_std[row] / cf * (cf * g[k] - gsum - yv[k] * gy);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(r * c);
                        for row in 0..r {
                            dp.extend_from_slice(&g[row * total + offset..row * total + offset + c]);
                        }
                        self.acc(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c, len) = (xv.rows(), xv.cols(), y.cols());
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len]
                        .copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                self.acc(grads, *x, &dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (row, src) in idx.iter().enumerate() {
                    if let Some(src) = src {
                        for k in 0..c {
                            dx[src * c + k] += g[row * c + k];
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.acc(grads, *x, &dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let dx = vec![g[0] / n as f64; n];
                self.acc(grads, *x, &dx);
            }
            Op::RowNorms(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for row in 0..xv.rows() {
                    let norm = y.data()[row];
                    if norm > 0.0 {
                        for k in 0..c {
                            dx[row * c + k] = g[row] * xv.data()[row * c + k] / norm;
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let m = targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0] / m).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * c + t] -= g[0] / m;
                }
                self.acc(grads, *logits, &dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let m = targets.len() as f64;
                let dx: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * g[0] / m)
                    .collect();
                self.acc(grads, *logits, &dx);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, g)| *b += g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the matching buffers of `store`.
    ///
    /// A parameter used several times on the tape accumulates every use.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (node, name) in &self.params {
            let Some(g) = &self.grads[*node] else { continue };
            let t = store.get_mut(name)?;
            if t.numel() != g.numel() {
                return Err(Error::dim(format!(
                    "gradient for {name:?} has {} values, parameter has {}",
                    g.numel(),
                    t.numel()
                )));
            }
            let buf = t
                .grad_mut()
                .ok_or_else(|| Error::State(format!("parameter {name:?} has no grad buffer")))?;
            buf.iter_mut().zip(g.data()).for_each(|(b, g)| *b += g);
        }
        Ok(())
    }
}
