//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node appended after its inputs, so
//! node order is already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Node values never change after they are recorded.

use std::collections::BTreeMap;

use super::matrix::{
    gelu, gelu_derivative, norm_stats, softmax_cross_entropy, softmax_in_place, Matrix,
};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Identifier for a trainable leaf; gradients are reported under it.
pub type ParamKey = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        param: Option<ParamKey>,
    },
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `[m×n] + [1×n]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SliceRows {
        src: NodeId,
        start: usize,
    },
    SliceCols {
        src: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    /// Column sums, `[m×n] → [1×n]`.
    SumRows(NodeId),
    Dot(NodeId, NodeId),
    Pick {
        src: NodeId,
        row: usize,
        col: usize,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A computation graph owned by one evaluation context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Matrix>,
}

macro_rules! check_shape {
    ($op:expr, $cond:expr, $l:expr, $r:expr) => {
        if !$cond {
            return Err(Error::ShapeMismatch {
                op: $op,
                left: $l,
                right: $r,
            });
        }
    };
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

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Constant input; receives a gradient but is not reported by [`Tape::param_grads`].
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Trainable leaf registered under `key`.
    pub fn param(&mut self, key: ParamKey, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { param: Some(key) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_transposed(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        check_shape!(
            "add_row",
            self.shape(row) == (1, n),
            (m, n),
            self.shape(row)
        );
        let mut v = self.value(a).clone();
        let r = self.value(row).values().to_vec();
        for i in 0..m {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = super::matrix::softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm with `[1×n]` gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        check_shape!(
            "layer_norm",
            self.shape(gain) == (1, n),
            (m, n),
            self.shape(gain)
        );
        check_shape!(
            "layer_norm",
            self.shape(bias) == (1, n),
            (m, n),
            self.shape(bias)
        );
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::input("layer_norm eps must be positive"));
        }
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let src = self.value(x);
        let mut v = Matrix::zeros(m, n);
        for i in 0..m {
            let row = src.row(i);
            let (mean, inv_std) = norm_stats(row, eps);
            for (j, out) in v.row_mut(i).iter_mut().enumerate() {
                *out = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push(v, Op::LayerNormRows { x, gain, bias, eps }))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(src);
        check_shape!("slice_rows", start + len <= m, (m, n), (start, len));
        let vals = self.value(src).values()[start * n..(start + len) * n].to_vec();
        let v = Matrix::from_vec(len, n, vals)?;
        Ok(self.push(v, Op::SliceRows { src, start }))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(src);
        check_shape!("slice_cols", start + len <= n, (m, n), (start, len));
        let s = self.value(src);
        let mut v = Matrix::zeros(m, len);
        for i in 0..m {
            v.row_mut(i).copy_from_slice(&s.row(i)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols { src, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat_rows of nothing"))?;
        let n = self.shape(*first).1;
        let mut vals = Vec::new();
        let mut rows = 0;
        for &p in parts {
            check_shape!(
                "concat_rows",
                self.shape(p).1 == n,
                self.shape(*first),
                self.shape(p)
            );
            vals.extend_from_slice(self.value(p).values());
            rows += self.shape(p).0;
        }
        let v = Matrix::from_vec(rows, n, vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat_cols of nothing"))?;
        let m = self.shape(*first).0;
        let mut total = 0;
        for &p in parts {
            check_shape!(
                "concat_cols",
                self.shape(p).0 == m,
                self.shape(*first),
                self.shape(p)
            );
            total += self.shape(p).1;
        }
        let mut v = Matrix::zeros(m, total);
        let mut offset = 0;
        for &p in parts {
            let src = self.value(p);
            let w = src.cols();
            for i in 0..m {
                v.row_mut(i)[offset..offset + w].copy_from_slice(src.row(i));
            }
            offset += w;
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::input(format!(
                "gather index {bad} out of range for {m} rows"
            )));
        }
        let t = self.value(table);
        let mut vals = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            vals.extend_from_slice(t.row(i));
        }
        let v = Matrix::from_vec(ids.len(), n, vals)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = Matrix::zeros(1, src.cols());
        for i in 0..src.rows() {
            for (o, x) in v.values_mut().iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        self.push(v, Op::SumRows(a))
    }

    /// Frobenius inner product, `Σ aᵢⱼ·bᵢⱼ` as a 1x1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_shape!(
            "dot",
            self.shape(a) == self.shape(b),
            self.shape(a),
            self.shape(b)
        );
        let v = super::matrix::dot(self.value(a).values(), self.value(b).values());
        Ok(self.push(Matrix::scalar(v), Op::Dot(a, b)))
    }

    pub fn pick(&mut self, src: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let (m, n) = self.shape(src);
        check_shape!("pick", row < m && col < n, (m, n), (row, col));
        let v = Matrix::scalar(self.value(src).get(row, col));
        Ok(self.push(v, Op::Pick { src, row, col }))
    }

    /// `−log softmax(logits)[target]` for a `[1×n]` logit row.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let (m, n) = self.shape(logits);
        check_shape!("cross_entropy", m == 1 && target < n, (m, n), (1, target));
        let loss = softmax_cross_entropy(self.value(logits).values(), target);
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Gradient accumulated at `id` by the last [`Tape::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0)
    }

    /// Reverse sweep from a 1x1 `root`. All gradient buffers are reset first.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        self.grads[root.0].values_mut()[0] = 1.0;

        for idx in (0..=root.0).rev() {
            let g = std::mem::replace(&mut self.grads[idx], Matrix::zeros(0, 0));
            if g.values().iter().all(|&v| v == 0.0) {
                self.grads[idx] = g;
                continue;
            }
            self.propagate(idx, &g)?;
            self.grads[idx] = g;
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, delta: &Matrix) {
        self.grads[id.0].add_scaled_assign(delta, 1.0);
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) -> Result<()> {
        // Ops are cloned out so parent buffers can be borrowed mutably.
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_transposed(self.value(b))?;
                let db = self.value(a).transposed_matmul(g)?;
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::MatMulT(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                let da = g.matmul(self.value(b))?;
                let db = g.transposed_matmul(self.value(a))?;
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::Transpose(a) => {
                let da = g.transpose();
                self.acc(a, &da);
            }
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                self.grads[b.0].add_scaled_assign(g, -1.0);
            }
            Op::AddRow(a, row) => {
                self.acc(a, g);
                let n = g.cols();
                let gr = &mut self.grads[row.0];
                for i in 0..g.rows() {
                    for j in 0..n {
                        gr.values_mut()[j] += g.get(i, j);
                    }
                }
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                let db = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::Scale(a, s) => {
                self.grads[a.0].add_scaled_assign(g, s);
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(a), "gelu", |gv, x| gv * gelu_derivative(x))?;
                self.acc(a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = super::matrix::dot(yr, gr);
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - inner);
                    }
                }
                self.acc(a, &da);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let src = self.value(x);
                let gv = self.value(gain).values().to_vec();
                let (m, n) = src.shape();
                let nf = n as f64;
                let mut dx = Matrix::zeros(m, n);
                let mut dgain = Matrix::zeros(1, n);
                let mut dbias = Matrix::zeros(1, n);
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for i in 0..m {
                    let row = src.row(i);
                    let (mean, inv_std) = norm_stats(row, eps);
                    let gr = g.row(i);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * gv[j];
                        dgain.values_mut()[j] += gr[j] * xhat[j];
                        dbias.values_mut()[j] += gr[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = super::matrix::dot(&dxhat, &xhat) / nf;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.acc(x, &dx);
                self.acc(gain, &dgain);
                self.acc(bias, &dbias);
            }
            Op::SliceRows { src, start } => {
                let n = g.cols();
                let gs = &mut self.grads[src.0];
                for (k, v) in g.values().iter().enumerate() {
                    gs.values_mut()[start * n + k] += v;
                }
            }
            Op::SliceCols { src, start } => {
                let gs = &mut self.grads[src.0];
                for i in 0..g.rows() {
                    let dst = &mut gs.row_mut(i)[start..start + g.cols()];
                    for (d, v) in dst.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.grads[p.0].len();
                    let gp = &mut self.grads[p.0];
                    for (d, v) in gp
                        .values_mut()
                        .iter_mut()
                        .zip(&g.values()[offset..offset + len])
                    {
                        *d += v;
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let gp = &mut self.grads[p.0];
                    let w = gp.cols();
                    for i in 0..g.rows() {
                        for (d, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[offset..offset + w]) {
                            *d += v;
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let gt = &mut self.grads[table.0];
                for (i, &id) in ids.iter().enumerate() {
                    for (d, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.grads[a.0]
                    .values_mut()
                    .iter_mut()
                    .for_each(|d| *d += s);
            }
            Op::SumRows(a) => {
                let ga = &mut self.grads[a.0];
                for i in 0..ga.rows() {
                    for (d, v) in ga.row_mut(i).iter_mut().zip(g.values()) {
                        *d += v;
                    }
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                self.grads[a.0].add_scaled_assign(&vb, s);
                self.grads[b.0].add_scaled_assign(&va, s);
            }
            Op::Pick { src, row, col } => {
                let gs = &mut self.grads[src.0];
                let v = gs.get(row, col) + g.item();
                gs.set(row, col, v);
            }
            Op::CrossEntropy { logits, target } => {
                let s = g.item();
                let mut p = self.value(logits).values().to_vec();
                softmax_in_place(&mut p);
                p[target] -= 1.0;
                let gl = &mut self.grads[logits.0];
                for (d, v) in gl.values_mut().iter_mut().zip(&p) {
                    *d += s * v;
                }
            }
        }
        Ok(())
    }

    /// Gradients of every registered parameter leaf after [`Tape::backward`].
    ///
    /// Leaves that the root does not depend on report a zero matrix. A key
    /// registered more than once has its gradients summed.
    pub fn param_grads(&self) -> BTreeMap<ParamKey, Matrix> {
        let mut out: BTreeMap<ParamKey, Matrix> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(key) } = node.op {
                let g = self
                    .grads
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                match out.get_mut(&key) {
                    Some(acc) => acc.add_scaled_assign(&g, 1.0),
                    None => {
                        out.insert(key, g);
                    }
                }
            }
        }
        out
    }
}
