//! Reverse-mode differentiation over a per-forward-pass operation tape.
//!
//! A [`Tape`] is created for one forward pass, records every primitive in
//! execution order and is consumed by [`Tape::backward`]. Because nodes are
//! appended only after their inputs, walking the node list from the loss
//! back to index 0 is a reverse topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, shape_error, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: NormStats },
    StandardizeCols { x: Var, stats: NormStats },
    Sum(Var),
    MeanCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    BarlowTwins { c: Var, tau: f64, alpha: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Normalized values and the per-group scale used to produce them.
#[derive(Debug)]
struct NormStats {
    xhat: Tensor,
    inv_std: Vec<f64>,
    clamped: Vec<bool>,
}

/// Normalizes every row to zero mean and unit population variance. Rows with
/// variance below `eps` are divided by `sqrt(eps)` instead, so constant rows
/// map to zero and non-degenerate rows come out with variance exactly one.
fn normalize_rows(x: &Tensor, eps: f64) -> NormStats {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let mut clamped = Vec::with_capacity(rows);
    let n = cols as f64;
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let low = var < eps;
        let inv = 1.0 / if low { eps } else { var }.sqrt();
        for (o, &v) in xhat.row_slice_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
        clamped.push(low);
    }
    NormStats { xhat, inv_std, clamped }
}

fn normalize_rows_backward(dxhat: &Tensor, stats: &NormStats) -> Tensor {
    let (rows, cols) = dxhat.shape();
    let n = cols as f64;
    let mut dx = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let g = dxhat.row_slice(r);
        let xh = stats.xhat.row_slice(r);
        let inv = stats.inv_std[r];
        let g_mean = g.iter().sum::<f64>() / n;
        let out = dx.row_slice_mut(r);
        if stats.clamped[r] {
            // Constant denominator: only the centering contributes.
            for (o, &gv) in out.iter_mut().zip(g) {
                *o = inv * (gv - g_mean);
            }
        } else {
            let gx_mean = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                *o = inv * (gv - g_mean - xv * gx_mean);
            }
        }
    }
    dx
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    /// Gradient for a tensor previously bound with [`Tape::param`].
    pub fn param(&self, tensor: &Tensor) -> Option<&Tensor> {
        self.params.get(&param_key(tensor)).and_then(|v| self.by_leaf.get(v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn param_key(tensor: &Tensor) -> usize {
    tensor as *const Tensor as usize
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a model parameter as a differentiable leaf. Binding the same
    /// tensor twice returns the same node, and the gradient can later be
    /// looked up by the tensor itself via [`Gradients::param`].
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let key = param_key(tensor);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(tensor.clone());
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn zip_same(&self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_error(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1×cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_error("add_row", x.shape(), r.shape()));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_slice_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("div", a, b, |p, q| p / q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Multiplies by a fixed mask (dropout keep-mask already scaled).
    pub fn apply_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each row over its features, then applies `gain` and `bias`
    /// (both `1×cols`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        for v in [gain, bias] {
            let s = self.value(v).shape();
            if s != (1, cols) {
                return Err(shape_error("layernorm", self.value(x).shape(), s));
            }
        }
        let stats = normalize_rows(self.value(x), eps);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = stats.xhat.clone();
        for r in 0..value.rows() {
            for ((o, &gv), &bv) in value.row_slice_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    /// Standardizes each column with its batch mean and population variance.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Var {
        let stats = normalize_rows(&self.value(x).transpose(), eps);
        let value = stats.xhat.transpose();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::StandardizeCols { x, stats }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Column means as a `1×cols` row.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let mut value = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in value.data_mut().iter_mut().zip(x.row_slice(r)) {
                *o += v / n;
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MeanCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_error("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row_slice(r);
                value.row_slice_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_error("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::Shape(format!(
                "slice_cols: columns {start}..{} out of range for {}x{}",
                start + len,
                t.rows(),
                t.cols()
            )));
        }
        let mut value = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            value.row_slice_mut(r).copy_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::Shape(format!(
                "slice_rows: rows {start}..{} out of range for {}x{}",
                start + len,
                t.rows(),
                t.cols()
            )));
        }
        let data = t.data()[start * t.cols()..(start + len) * t.cols()].to_vec();
        let value = Tensor::from_vec(len, t.cols(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.len() != rows * cols {
            return Err(shape_error("reshape", t.shape(), (rows, cols)));
        }
        let value = Tensor::from_vec(rows, cols, t.data().to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean cross-entropy of `labels` under row-softmax of `logits`,
    /// computed through a stable log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() || z.rows() == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows for {} labels",
                z.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::Contract(format!("label {bad} out of range for {} classes", z.cols())));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let probs = softmax_rows(z);
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// `Σ_j (C_jj − τ)² + α Σ_{j≠k} C_jk²` for a square matrix `C`.
    pub fn barlow_twins(&mut self, c: Var, tau: f64, alpha: f64) -> Result<Var> {
        let m = self.value(c);
        if m.rows() != m.cols() {
            return Err(Error::Shape(format!("barlow_twins: matrix {}x{} is not square", m.rows(), m.cols())));
        }
        let value = Tensor::scalar(barlow_twins_value(m, tau, alpha));
        let rg = self.any_grad(&[c]);
        Ok(self.push(value, Op::BarlowTwins { c, tau, alpha }, rg))
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut by_leaf = HashMap::new();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    let (r, c) = node.value.shape();
                    by_leaf.insert(Var(i), Tensor::zeros(r, c));
                }
                continue;
            };
            self.propagate(node, g, Var(i), &mut grads, &mut by_leaf)?;
        }
        // Leaves recorded after the loss still get an (all-zero) entry.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let (r, c) = node.value.shape();
                by_leaf.insert(Var(i), Tensor::zeros(r, c));
            }
        }
        Ok(Gradients { by_leaf, params: self.params })
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        id: Var,
        grads: &mut [Option<Tensor>],
        by_leaf: &mut HashMap<Var, Tensor>,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        match &node.op {
            Op::Leaf => {
                by_leaf.insert(id, g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_nt(g.data(), bv.data(), da.data_mut(), g.rows(), g.cols(), bv.rows());
                    send(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_tn(av.data(), g.data(), db.data_mut(), av.rows(), av.cols(), g.cols());
                    send(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ ⇒ da = g·b, db = gᵀ·a
                let (av, bv) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_nn(g.data(), bv.data(), da.data_mut(), g.rows(), g.cols(), bv.cols());
                    send(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_tn(g.data(), av.data(), db.data_mut(), g.rows(), g.cols(), av.cols());
                    send(*b, db);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::AddRow(a, row) => {
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in dr.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                send(*row, dr);
                send(*a, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, elementwise(&g, bv, |x, y| x * y));
                send(*b, elementwise(&g, av, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, elementwise(&g, bv, |x, y| x / y));
                let mut db = elementwise(&g, av, |x, y| -x * y);
                for (o, &d) in db.data_mut().iter_mut().zip(bv.data()) {
                    *o /= d * d;
                }
                send(*b, db);
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
            Op::Relu(a) => {
                let x = val(*a);
                send(*a, elementwise(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &yv), &gv) in dx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let gv = val(*gain);
                let cols = g.cols();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row_slice(r), stats.xhat.row_slice(r));
                        for c in 0..cols {
                            dg.data_mut()[c] += gr[c] * xr[c];
                            db.data_mut()[c] += gr[c];
                        }
                    }
                    send(*gain, dg);
                    send(*bias, db);
                }
                if self.requires_grad(*x) {
                    let mut dxhat = g;
                    for r in 0..dxhat.rows() {
                        for (o, &s) in dxhat.row_slice_mut(r).iter_mut().zip(gv.data()) {
                            *o *= s;
                        }
                    }
                    send(*x, normalize_rows_backward(&dxhat, stats));
                }
            }
            Op::StandardizeCols { x, stats } => {
                send(*x, normalize_rows_backward(&g.transpose(), stats).transpose());
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MeanCols(a) => {
                let rows = val(*a).rows();
                let mut dx = Tensor::zeros(rows, g.cols());
                for r in 0..rows {
                    for (o, &v) in dx.row_slice_mut(r).iter_mut().zip(g.data()) {
                        *o = v / rows as f64;
                    }
                }
                send(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    offset += w;
                    send(p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let data = g.data()[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    send(p, Tensor::from_vec(r, c, data)?);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.row_slice_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row_slice(i));
                }
                send(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = val(*x).shape();
                let mut dx = Tensor::zeros(r, c);
                dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                send(*x, dx);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Tensor::from_vec(r, c, g.into_vec())?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.data()[0] / labels.len() as f64;
                let mut dz = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = dz.get(r, l);
                    dz.set(r, l, v - 1.0);
                }
                send(*logits, dz.map(|v| v * scale));
            }
            Op::BarlowTwins { c, tau, alpha } => {
                let m = val(*c);
                let s = g.data()[0];
                let mut dc = Tensor::zeros(m.rows(), m.cols());
                for j in 0..m.rows() {
                    for k in 0..m.cols() {
                        let v = m.get(j, k);
                        let d = if j == k { 2.0 * (v - tau) } else { 2.0 * alpha * v };
                        dc.set(j, k, s * d);
                    }
                }
                send(*c, dc);
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Row-wise softmax on plain tensors.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn barlow_twins_value(c: &Tensor, tau: f64, alpha: f64) -> f64 {
    let mut on = 0.0;
    let mut off = 0.0;
    for j in 0..c.rows() {
        for k in 0..c.cols() {
            let v = c.get(j, k);
            if j == k {
                on += (v - tau) * (v - tau);
            } else {
                off += v * v;
            }
        }
    }
    on + alpha * off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::column(&[1.0, -2.0, 3.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::column(&[-1.0, 2.0]));
        let r = tape.relu(w);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::column(&[1.0, 2.0]));
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(&[1.0, 2.0]));
        let w = tape.leaf(Tensor::row(&[3.0, 4.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::row(&[3.0, 4.0]));
        let unused = tape.leaf(Tensor::row(&[1.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn param_binding_is_idempotent() {
        let weight = Tensor::row(&[1.0, 2.0]);
        let mut tape = Tape::new();
        let a = tape.param(&weight);
        let b = tape.param(&weight);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(&weight).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::row(&[0.0, 0.0, 0.0]));
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&Tensor::row(&[1000.0, 1000.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&Tensor::row(&[1.0, 2.0, 3.0]));
        // e^k / (e + e² + e³)
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let expected = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        for (v, e) in y.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        for (v, e) in y.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((v - e).abs() < 1e-3);
        }
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[5.0, 5.0, 5.0]]));
        let g = tape.constant(Tensor::ones(1, 3));
        let b = tape.constant(Tensor::zeros(1, 3));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = tape.constant(Tensor::row(&[1.0, 3.0]));
        let g = tape.constant(Tensor::ones(1, 2));
        let b = tape.constant(Tensor::zeros(1, 2));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_rejects_wrong_gain_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        let g = tape.constant(Tensor::ones(1, 2));
        let b = tape.constant(Tensor::zeros(1, 3));
        assert!(tape.layernorm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[&[1.0], &[2.0]]));
        let b = tape.leaf(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        let back = tape.slice_cols(c, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let r = tape.concat_rows(&[b, b]).unwrap();
        let s = tape.slice_rows(r, 2, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 5));
        let ce = tape.cross_entropy(z, &[0, 2, 4]).unwrap();
        assert!((tape.value(ce).data()[0] - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mismatched_add_is_a_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 2));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }
}
