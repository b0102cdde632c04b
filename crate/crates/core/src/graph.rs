//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] is built afresh for every forward pass: leaves hold inputs and
//! parameters, interior nodes record the op and its parents, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Only the op set needed by the alignment losses, the toy encoders, and the
//! fused classifier is implemented; every op has a hand-derived adjoint.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::{math, shape_err};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    L2NormalizeRows(NodeId),
    SoftmaxRows(NodeId),
    /// Softmax over entries where the mask is nonzero; masked entries get 0.
    SoftmaxRowsMasked(NodeId, Tensor),
    LogSoftmaxRows(NodeId),
    /// Log-softmax over unmasked entries; masked entries are set to
    /// `f64::NEG_INFINITY` in the output and receive zero gradient.
    LogSoftmaxRowsMasked(NodeId, Tensor),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
    /// Frobenius inner product with a constant weight matrix; scalar output.
    WeightedSum(NodeId, Tensor),
    MeanRows(NodeId),
    Reshape(NodeId),
    PadRows(NodeId, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar convenience accessor for `[1,1]` nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scaled(c);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a [m,k] * b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    /// `a [m,n] + bias [1,n]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err!(
                "add_row_broadcast: {}x{} + {}x{}",
                x.rows(),
                x.cols(),
                b.rows(),
                b.cols()
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.row(0)) {
                *v += bb;
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBroadcast(a, bias), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(math::tanh);
        let rg = self.needs(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Row-wise L2 normalization. Rows must have nonzero norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            let n = crate::tensor::norm(value.row(r));
            if n == 0.0 {
                return Err(crate::domain_err!(
                    "l2_normalize_rows: row {r} has zero norm"
                ));
            }
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(value, Op::L2NormalizeRows(a), rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows_value(self.value(a), None);
        let rg = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn softmax_rows_masked(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        if !self.value(a).same_shape(&mask) {
            return Err(shape_err!("softmax mask shape mismatch"));
        }
        let value = softmax_rows_value(self.value(a), Some(&mask));
        let rg = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRowsMasked(a, mask), rg))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows_value(self.value(a), None);
        let rg = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows_masked(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        if !self.value(a).same_shape(&mask) {
            return Err(shape_err!("log_softmax mask shape mismatch"));
        }
        let value = log_softmax_rows_value(self.value(a), Some(&mask));
        let rg = self.needs(a);
        Ok(self.push(value, Op::LogSoftmaxRowsMasked(a, mask), rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(shape_err!(
                "concat_cols: {} rows vs {} rows",
                x.rows(),
                y.rows()
            ));
        }
        let mut value = Tensor::zeros(x.rows(), x.cols() + y.cols());
        for r in 0..x.rows() {
            value.row_mut(r)[..x.cols()].copy_from_slice(x.row(r));
            value.row_mut(r)[x.cols()..].copy_from_slice(y.row(r));
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err!("concat_rows: empty part list"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(shape_err!("concat_rows: inconsistent column counts"));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start >= end || end > x.rows() {
            return Err(shape_err!(
                "slice_rows: [{start},{end}) out of {} rows",
                x.rows()
            ));
        }
        let cols = x.cols();
        let data = x.data()[start * cols..end * cols].to_vec();
        let value = Tensor::from_vec(end - start, cols, data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SliceRows(a, start, end), rg))
    }

    /// Row lookup (embedding): output row i = `a.row(idx[i])`.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        let mut value = Tensor::zeros(idx.len(), x.cols());
        for (i, &j) in idx.iter().enumerate() {
            if j >= x.rows() {
                return Err(shape_err!("gather_rows: index {j} out of {}", x.rows()));
            }
            value.row_mut(i).copy_from_slice(x.row(j));
        }
        let rg = self.needs(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        let mut value = Tensor::zeros(x.rows(), idx.len());
        for r in 0..x.rows() {
            for (i, &j) in idx.iter().enumerate() {
                if j >= x.cols() {
                    return Err(shape_err!("gather_cols: index {j} out of {}", x.cols()));
                }
                value.set(r, i, x.get(r, j));
            }
        }
        let rg = self.needs(a);
        Ok(self.push(value, Op::GatherCols(a, idx.to_vec()), rg))
    }

    /// Scalar `sum(a .* weights)` against a constant weight matrix.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor) -> Result<NodeId> {
        let x = self.value(a);
        if !x.same_shape(&weights) {
            return Err(shape_err!(
                "weighted_sum: value {}x{} vs weights {}x{}",
                x.rows(),
                x.cols(),
                weights.rows(),
                weights.cols()
            ));
        }
        let mut acc = 0.0;
        for (v, w) in x.data().iter().zip(weights.data()) {
            if *w != 0.0 {
                acc += v * w;
            }
        }
        let value = Tensor::from_vec(1, 1, vec![acc])?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::WeightedSum(a, weights), rg))
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let m = x.rows() as f64;
        let mut value = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (acc, v) in value.row_mut(0).iter_mut().zip(x.row(r)) {
                *acc += v / m;
            }
        }
        let rg = self.needs(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(shape_err!(
                "reshape: {}x{} -> {}x{}",
                x.rows(),
                x.cols(),
                rows,
                cols
            ));
        }
        let value = Tensor::from_vec(rows, cols, x.data().to_vec())?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Zero-pad with extra rows up to `target_rows`.
    pub fn pad_rows(&mut self, a: NodeId, target_rows: usize) -> Result<NodeId> {
        let x = self.value(a);
        if target_rows < x.rows() {
            return Err(shape_err!(
                "pad_rows: target {target_rows} < current {}",
                x.rows()
            ));
        }
        let mut value = Tensor::zeros(target_rows, x.cols());
        value.data_mut()[..x.len()].copy_from_slice(x.data());
        let rg = self.needs(a);
        Ok(self.push(value, Op::PadRows(a, target_rows), rg))
    }

    /// Reverse pass from a scalar output node; returns per-node gradients
    /// (None for nodes not requiring grad or unreachable from `output`).
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.value(output).len() != 1 {
            return Err(shape_err!("backward: output node must be scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_vec(1, 1, vec![1.0])?);

        for i in (0..=output.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.accumulate_parents(i, &grad, &mut grads)?;
            grads[i] = Some(grad);
        }
        Ok(grads)
    }

    /// Gradient of `output` w.r.t. a specific node after `backward`.
    pub fn grad<'a>(&self, grads: &'a [Option<Tensor>], id: NodeId) -> Option<&'a Tensor> {
        grads[id.0].as_ref()
    }

    fn accumulate_parents(
        &self,
        node: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => g.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, grad.clone());
                add_to(grads, *b, grad.clone());
            }
            Op::Scale(a, c) => {
                add_to(grads, *a, grad.scaled(*c));
            }
            Op::Hadamard(a, b) => {
                add_to(grads, *a, grad.hadamard(self.value(*b))?);
                add_to(grads, *b, grad.hadamard(self.value(*a))?);
            }
            Op::MatMul(a, b) => {
                // y = A B: dA = G B^T, dB = A^T G
                add_to(grads, *a, grad.matmul_nt(self.value(*b))?);
                add_to(grads, *b, self.value(*a).matmul_tn(grad)?);
            }
            Op::MatMulNT(a, b) => {
                // y = A B^T: dA = G B, dB = G^T A
                add_to(grads, *a, grad.matmul(self.value(*b))?);
                add_to(grads, *b, grad.matmul_tn(self.value(*a))?);
            }
            Op::AddRowBroadcast(a, bias) => {
                add_to(grads, *a, grad.clone());
                let mut bg = Tensor::zeros(1, grad.cols());
                for r in 0..grad.rows() {
                    for (acc, g) in bg.row_mut(0).iter_mut().zip(grad.row(r)) {
                        *acc += g;
                    }
                }
                add_to(grads, *bias, bg);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[node].value;
                let mut d = grad.clone();
                for (g, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *g *= 1.0 - yv * yv;
                }
                add_to(grads, *a, d);
            }
            Op::L2NormalizeRows(a) => {
                // y = x/||x||; dx = (g - y (y . g)) / ||x||
                let x = self.value(*a);
                let y = &self.nodes[node].value;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = crate::tensor::norm(x.row(r));
                    let ydotg = crate::tensor::dot(y.row(r), grad.row(r));
                    for c in 0..x.cols() {
                        d.set(r, c, (grad.get(r, c) - y.get(r, c) * ydotg) / n);
                    }
                }
                add_to(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[node].value;
                add_to(grads, *a, softmax_backward(y, grad, None));
            }
            Op::SoftmaxRowsMasked(a, mask) => {
                let y = &self.nodes[node].value;
                add_to(grads, *a, softmax_backward(y, grad, Some(mask)));
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[node].value;
                add_to(grads, *a, log_softmax_backward(y, grad, None));
            }
            Op::LogSoftmaxRowsMasked(a, mask) => {
                let y = &self.nodes[node].value;
                add_to(grads, *a, log_softmax_backward(y, grad, Some(mask)));
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let mut ga = Tensor::zeros(grad.rows(), ac);
                let mut gb = Tensor::zeros(grad.rows(), grad.cols() - ac);
                for r in 0..grad.rows() {
                    ga.row_mut(r).copy_from_slice(&grad.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&grad.row(r)[ac..]);
                }
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let cols = grad.cols();
                    let data = grad.data()[offset * cols..(offset + pr) * cols].to_vec();
                    add_to(grads, p, Tensor::from_vec(pr, cols, data)?);
                    offset += pr;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..grad.rows() {
                    d.row_mut(start + r).copy_from_slice(grad.row(r));
                }
                add_to(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for (i, &j) in idx.iter().enumerate() {
                    for (acc, g) in d.row_mut(j).iter_mut().zip(grad.row(i)) {
                        *acc += g;
                    }
                }
                add_to(grads, *a, d);
            }
            Op::GatherCols(a, idx) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (i, &j) in idx.iter().enumerate() {
                        let cur = d.get(r, j);
                        d.set(r, j, cur + grad.get(r, i));
                    }
                }
                add_to(grads, *a, d);
            }
            Op::WeightedSum(a, weights) => {
                add_to(grads, *a, weights.scaled(grad.data()[0]));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let m = x.rows() as f64;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (dv, g) in d.row_mut(r).iter_mut().zip(grad.row(0)) {
                        *dv = g / m;
                    }
                }
                add_to(grads, *a, d);
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                add_to(
                    grads,
                    *a,
                    Tensor::from_vec(x.rows(), x.cols(), grad.data().to_vec())?,
                );
            }
            Op::PadRows(a, _target) => {
                let x = self.value(*a);
                let data = grad.data()[..x.len()].to_vec();
                add_to(grads, *a, Tensor::from_vec(x.rows(), x.cols(), data)?);
            }
        }
        Ok(())
    }
}

fn softmax_rows_value(x: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let alive = |c: usize| mask.map_or(true, |m| m.get(r, c) != 0.0);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if alive(c) && v > max {
                max = v;
            }
        }
        let mut denom = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if alive(c) {
                denom += math::exp(v - max);
            }
        }
        for (c, &v) in row.iter().enumerate() {
            if alive(c) {
                out.set(r, c, math::exp(v - max) / denom);
            }
        }
    }
    out
}

fn log_softmax_rows_value(x: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let alive = |c: usize| mask.map_or(true, |m| m.get(r, c) != 0.0);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if alive(c) && v > max {
                max = v;
            }
        }
        let mut denom = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if alive(c) {
                denom += math::exp(v - max);
            }
        }
        let lse = max + math::ln(denom);
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, if alive(c) { v - lse } else { f64::NEG_INFINITY });
        }
    }
    out
}

/// d softmax: dx = y .* (g - sum(g .* y)) per row, zero at masked entries.
fn softmax_backward(y: &Tensor, grad: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let mut d = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let alive = |c: usize| mask.map_or(true, |m| m.get(r, c) != 0.0);
        let mut gdoty = 0.0;
        for c in 0..y.cols() {
            if alive(c) {
                gdoty += grad.get(r, c) * y.get(r, c);
            }
        }
        for c in 0..y.cols() {
            if alive(c) {
                d.set(r, c, y.get(r, c) * (grad.get(r, c) - gdoty));
            }
        }
    }
    d
}

/// d log_softmax: dx = g - softmax(x) * sum(g) per row, zero at masked entries.
fn log_softmax_backward(y: &Tensor, grad: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let mut d = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let alive = |c: usize| mask.map_or(true, |m| m.get(r, c) != 0.0);
        let mut gsum = 0.0;
        for c in 0..y.cols() {
            if alive(c) {
                gsum += grad.get(r, c);
            }
        }
        for c in 0..y.cols() {
            if alive(c) {
                let p = math::exp(y.get(r, c));
                d.set(r, c, grad.get(r, c) - p * gsum);
            }
        }
    }
    d
}
