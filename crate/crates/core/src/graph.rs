//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes its result
//! immediately (eager evaluation); an op only remembers its inputs when at
//! least one of them requires a gradient. Because nodes are appended in
//! evaluation order, the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use choreo_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::row_vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::attention::SparseAttention;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: maps the output gradient and the
/// input values to one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    TileRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    AbsSum(Var),
    MeanRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    LocalAttention {
        q: Var,
        k: Var,
        v: Var,
        weights: SparseAttention,
        scale: f64,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require a
    /// gradient or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
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

    /// Drops every node created after the graph had `len` nodes. Vars past
    /// that point become dangling; used to keep inference rollouts bounded.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies the current value of `v` into a new constant leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Concatenates along the last dimension; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last of nothing"))?;
        let lead = self.value(first).shape()[..self.value(first).rank() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.value(first).shape(), s));
            }
            width += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, cols) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if start >= end || end > cols {
            return Err(Error::invalid(alloc::format!(
                "slice_last: range {start}..{end} out of bounds for width {cols}"
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceLast(a, start), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::invalid(alloc::format!(
                "slice_rows: range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(end - start, cols, data), Op::SliceRows(a, start), rg))
    }

    /// Picks rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::invalid(alloc::format!(
                "gather_rows: indices out of bounds for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, data),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Repeats a `1 x d` row `n` times.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, cols) = self.value(a).dims2("tile_rows")?;
        if r != 1 || n == 0 {
            return Err(Error::shape("tile_rows", self.value(a).shape(), &[n, cols]));
        }
        let row = self.value(a).data();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(n, cols, data), Op::TileRows(a), rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sum of absolute values, shape `[1]`.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|x| x.abs()).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AbsSum(a), rg)
    }

    /// Column means of a matrix, shape `1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("mean_rows")?;
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (o, &x) in data.iter_mut().zip(self.value(a).row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / rows as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(1, cols, data), Op::MeanRows(a), rg))
    }

    /// Normalizes each row over the last dimension to zero mean and unit
    /// variance (`(x - mean) / sqrt(var + eps)`), no gain or bias.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Windowed attention `A_i = sum_{j in window(i)} softmax(q_i k_j^T / sqrt(d_k)) v_j`.
    ///
    /// `q`, `k` are `n x d_k`, `v` is `n x d_v`. Returns the output and the
    /// number of scored pairs.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Result<(Var, usize)> {
        let (n, d) = self.value(q).dims2("local_attention")?;
        if self.value(k).shape() != self.value(q).shape() {
            return Err(Error::shape("local_attention", self.value(q).shape(), self.value(k).shape()));
        }
        let (nv, dv) = self.value(v).dims2("local_attention")?;
        if nv != n {
            return Err(Error::shape("local_attention", self.value(q).shape(), self.value(v).shape()));
        }
        let scale = 1.0 / libm::sqrt(d as f64);
        let weights =
            SparseAttention::compute(self.value(q).data(), self.value(k).data(), n, d, window, scale);
        let out = weights.apply(self.value(v).data(), dv);
        let pairs = weights.pair_count();
        let rg = self.any_grad(&[q, k, v]);
        let var = self.push(
            Tensor::matrix(n, dv, out),
            Op::LocalAttention {
                q,
                k,
                v,
                weights,
                scale,
            },
            rg,
        );
        Ok((var, pairs))
    }

    /// Attention weights recorded by a [`Graph::local_attention`] node, if
    /// the node kept its tape entry.
    pub fn attention_weights(&self, v: Var) -> Option<&SparseAttention> {
        match &self.nodes[v.0].op {
            Op::LocalAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Records an op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), ga));
                self.accumulate(grads, *b, Tensor::from_parts(shape_of(*b), gb));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul")?;
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga));
                }
                if self.requires_grad(*b) {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::ConcatLast(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(self.value(p).len());
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, p, Tensor::from_parts(shape_of(p), data));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let data = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(grads, p, Tensor::from_parts(shape_of(p), data));
                }
            }
            Op::SliceLast(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    full.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, full);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                let cols = src.cols();
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, full);
            }
            Op::GatherRows(a, idx) => {
                let mut full = Tensor::zeros(self.value(*a).shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in full.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, full);
            }
            Op::TileRows(a) => {
                let cols = g.cols();
                let mut data = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (o, &x) in data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(1, cols, data));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                debug_assert_eq!(out.len(), y.rows() * cols);
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), out));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(l, q)| q - libm::exp(*l) * total));
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), out));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(q, &v)| if v > 0.0 { *q } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), data));
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(q, &s)| q * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), data));
            }
            Op::Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(q, &t)| q * (1.0 - t * t))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), data));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::AbsSum(a) => {
                let s = g.data()[0];
                let data = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|&x| {
                        if x > 0.0 {
                            s
                        } else if x < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(shape_of(*a), data));
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).dims2("mean_rows")?;
                let inv = 1.0 / rows as f64;
                let row: Vec<f64> = g.data().iter().map(|x| x * inv).collect();
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    data.extend_from_slice(&row);
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, cols, data));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let cols = y.cols();
                let inv_n = 1.0 / cols as f64;
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() * inv_n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() * inv_n;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(q, yv)| inv_std[r] * (q - mean_g - yv * mean_gy)),
                    );
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), out));
            }
            Op::LocalAttention {
                q,
                k,
                v,
                weights,
                scale,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (d, dv) = (tq.cols(), tv.cols());
                let (gq, gk, gv) =
                    weights.backward(tq.data(), tk.data(), tv.data(), d, dv, *scale, g.data());
                self.accumulate(grads, *q, Tensor::from_parts(shape_of(*q), gq));
                self.accumulate(grads, *k, Tensor::from_parts(shape_of(*k), gk));
                self.accumulate(grads, *v, Tensor::from_parts(shape_of(*v), gv));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = backward(g, &values);
                if gs.len() != inputs.len() {
                    return Err(Error::invalid("custom backward returned the wrong number of gradients"));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if gi.shape() != self.value(i).shape() {
                        return Err(Error::shape("custom backward", self.value(i).shape(), gi.shape()));
                    }
                    self.accumulate(grads, i, gi);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
