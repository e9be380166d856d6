//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a vector to every row.
    AddRow(NodeId, NodeId),
    /// Adds a one-element node to every entry.
    AddScalar(NodeId, NodeId),
    Scale(NodeId, T),
    /// Multiplies by element `index` of `weights`.
    ScaleByElem {
        x: NodeId,
        weights: NodeId,
        index: usize,
    },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SelectRow {
        x: NodeId,
        row: usize,
    },
    MeanRows(NodeId),
    StackRows(Vec<NodeId>),
    /// `n×n` matrix with one diagonal and one off-diagonal value.
    Constrained {
        diag: NodeId,
        off: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
    Sum(NodeId),
    AddN(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// A single-writer computation record.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(NodeId, ParamId)>,
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (t.rows(), t.last_dim()),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// Constant input; receives a gradient but is not tied to a parameter.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let mut value = store.get(id).clone();
        value.clear_grad();
        let node = self.push(value, Op::Leaf);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b)))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err(op, a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).last_dim();
        if self.value(bias).numel() != cols {
            return Err(self.shape_err("add_row", x, bias));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_exact_mut(cols) {
            for (r, bv) in row.iter_mut().zip(&b) {
                *r += *bv;
            }
        }
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(self.shape_err("add_scalar", x, s));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|e| e + sv);
        Ok(self.push(v, Op::AddScalar(x, s)))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn scale_by_elem(&mut self, x: NodeId, weights: NodeId, index: usize) -> Result<NodeId> {
        let limit = self.value(weights).numel();
        if index >= limit {
            return Err(Error::Index {
                what: "scale_by_elem weight",
                index,
                limit,
            });
        }
        let w = self.value(weights).data()[index];
        let v = self.value(x).map(|e| e * w);
        Ok(self.push(v, Op::ScaleByElem { x, weights, index }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let cols = v.last_dim();
        for row in v.data_mut().chunks_exact_mut(cols) {
            kernels::softmax_in_place(row);
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let v = super::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Row lookup: output row `r` is `table[rows[r]]`.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (n, cols) = dims(t);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "gather row",
                    index: r,
                    limit: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let v = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = dims(self.value(x));
        if start + len > c {
            return Err(Error::Index {
                what: "slice_cols end",
                index: start + len,
                limit: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = dims(self.value(parts[0])).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = dims(self.value(p));
            if pr != r {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Row `row` as a `1×cols` matrix.
    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let (r, c) = dims(self.value(x));
        if row >= r {
            return Err(Error::Index {
                what: "select_row",
                index: row,
                limit: r,
            });
        }
        let v = Tensor::new(vec![1, c], self.value(x).row(row).to_vec())?;
        Ok(self.push(v, Op::SelectRow { x, row }))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = dims(self.value(x));
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(self.value(x).row(i)) {
                *d += *v;
            }
        }
        let inv = T::lit(1.0 / r as f64);
        data.iter_mut().for_each(|d| *d *= inv);
        let v = Tensor::new(vec![1, c], data).expect("row mean shape");
        self.push(v, Op::MeanRows(x))
    }

    /// Stacks equally wide vectors (or `1×c` rows) into an `n×c` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let c = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.value(r).numel() != c {
                return Err(self.shape_err("stack_rows", rows[0], r));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let v = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(v, Op::StackRows(rows.to_vec())))
    }

    /// `n×n` matrix whose diagonal entries all equal `diag` and whose
    /// off-diagonal entries all equal `off` (both one-element nodes).
    pub fn constrained_matrix(&mut self, diag: NodeId, off: NodeId, n: usize) -> Result<NodeId> {
        if self.value(diag).numel() != 1 || self.value(off).numel() != 1 {
            return Err(self.shape_err("constrained_matrix", diag, off));
        }
        let (a, b) = (self.value(diag).data()[0], self.value(off).data()[0]);
        let data = (0..n * n)
            .map(|idx| if idx / n == idx % n { a } else { b })
            .collect();
        let v = Tensor::new(vec![n, n], data)?;
        Ok(self.push(v, Op::Constrained { diag, off }))
    }

    /// Scalar `-log softmax(logits)[label]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let loss = super::softmax_cross_entropy(self.value(logits).data(), label)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut v = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            if self.value(x).shape() != v.shape() {
                return Err(self.shape_err("add_n", xs[0], x));
            }
            for (a, b) in v.data_mut().iter_mut().zip(self.value(x).data()) {
                *a += *b;
            }
        }
        Ok(self.push(v, Op::AddN(xs.to_vec())))
    }

    /// Reverse sweep from a scalar node. Gradients of nodes that do not
    /// influence `seed` stay zero.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<T>> {
        if self.value(seed).numel() != 1 {
            return Err(Error::contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(seed).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![T::one()]);

        for idx in (0..=seed.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.map(|p| (NodeId(i), p)))
                .collect(),
        })
    }

    fn propagate(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value;
        macro_rules! acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                let n = self.nodes[id.0].value.numel();
                grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = dims(val(*b)).1;
                kernels::gemm_nt(dy, val(*b).data(), acc!(*a), m, n, k);
                kernels::gemm_tn(val(*a).data(), dy, acc!(*b), k, m, n);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(val(*a));
                let n = dims(val(*b)).0;
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                kernels::gemm_nn(dy, val(*b).data(), acc!(*a), m, n, k);
                kernels::gemm_tn(dy, val(*a).data(), acc!(*b), n, m, k);
            }
            Op::Add(a, b) => {
                for (g, d) in acc!(*a).iter_mut().zip(dy) {
                    *g += *d;
                }
                for (g, d) in acc!(*b).iter_mut().zip(dy) {
                    *g += *d;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                for ((g, d), y) in acc!(*a).iter_mut().zip(dy).zip(&vb) {
                    *g += *d * *y;
                }
                for ((g, d), x) in acc!(*b).iter_mut().zip(dy).zip(&va) {
                    *g += *d * *x;
                }
            }
            Op::AddRow(x, bias) => {
                for (g, d) in acc!(*x).iter_mut().zip(dy) {
                    *g += *d;
                }
                let cols = val(*bias).numel();
                let gb = acc!(*bias);
                for row in dy.chunks_exact(cols) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += *d;
                    }
                }
            }
            Op::AddScalar(x, s) => {
                for (g, d) in acc!(*x).iter_mut().zip(dy) {
                    *g += *d;
                }
                acc!(*s)[0] += dy.iter().copied().sum();
            }
            Op::Scale(x, c) => {
                for (g, d) in acc!(*x).iter_mut().zip(dy) {
                    *g += *d * *c;
                }
            }
            Op::ScaleByElem { x, weights, index } => {
                let w = val(*weights).data()[*index];
                for (g, d) in acc!(*x).iter_mut().zip(dy) {
                    *g += *d * w;
                }
                let dw: T = dy.iter().zip(val(*x).data()).map(|(d, v)| *d * *v).sum();
                acc!(*weights)[*index] += dw;
            }
            Op::Gelu(x) => {
                let xs = val(*x).data();
                for ((g, d), v) in acc!(*x).iter_mut().zip(dy).zip(xs) {
                    *g += *d * kernels::gelu_grad(*v);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let gx = acc!(*x);
                for ((yr, dr), gr) in y
                    .chunks_exact(cols)
                    .zip(dy.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let s: T = kernels::dot(yr, dr);
                    for j in 0..cols {
                        gr[j] += yr[j] * (dr[j] - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let cols = val(*x).last_dim();
                let mut dx = vec![T::zero(); val(*x).numel()];
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                kernels::layer_norm_rows_backward(
                    val(*x).data(),
                    val(*gain).data(),
                    *eps,
                    cols,
                    dy,
                    &mut dx,
                    &mut dg,
                    &mut db,
                );
                for (g, d) in acc!(*x).iter_mut().zip(&dx) {
                    *g += *d;
                }
                for (g, d) in acc!(*gain).iter_mut().zip(&dg) {
                    *g += *d;
                }
                for (g, d) in acc!(*bias).iter_mut().zip(&db) {
                    *g += *d;
                }
            }
            Op::Gather { table, rows } => {
                let cols = val(*table).last_dim();
                let gt = acc!(*table);
                for (r, d) in rows.iter().zip(dy.chunks_exact(cols)) {
                    for (g, v) in gt[r * cols..(r + 1) * cols].iter_mut().zip(d) {
                        *g += *v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).last_dim();
                let len = node.value.last_dim();
                let gx = acc!(*x);
                for (i, d) in dy.chunks_exact(len).enumerate() {
                    for (g, v) in gx[i * c + start..i * c + start + len].iter_mut().zip(d) {
                        *g += *v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).last_dim();
                    let gp = acc!(p);
                    for (i, d) in dy.chunks_exact(total).enumerate() {
                        for (g, v) in gp[i * pc..(i + 1) * pc].iter_mut().zip(&d[offset..offset + pc]) {
                            *g += *v;
                        }
                    }
                    offset += pc;
                }
            }
            Op::SelectRow { x, row } => {
                let c = val(*x).last_dim();
                for (g, d) in acc!(*x)[row * c..(row + 1) * c].iter_mut().zip(dy) {
                    *g += *d;
                }
            }
            Op::MeanRows(x) => {
                let c = val(*x).last_dim();
                let inv = T::lit(1.0 / val(*x).rows() as f64);
                for row in acc!(*x).chunks_exact_mut(c) {
                    for (g, d) in row.iter_mut().zip(dy) {
                        *g += *d * inv;
                    }
                }
            }
            Op::StackRows(rows) => {
                let c = node.value.last_dim();
                for (&r, d) in rows.iter().zip(dy.chunks_exact(c)) {
                    for (g, v) in acc!(r).iter_mut().zip(d) {
                        *g += *v;
                    }
                }
            }
            Op::Constrained { diag, off } => {
                let n = node.value.last_dim();
                let mut d_diag = T::zero();
                let mut d_off = T::zero();
                for (idx, d) in dy.iter().enumerate() {
                    if idx / n == idx % n {
                        d_diag += *d;
                    } else {
                        d_off += *d;
                    }
                }
                acc!(*diag)[0] += d_diag;
                acc!(*off)[0] += d_off;
            }
            Op::CrossEntropy { logits, label } => {
                let p = super::softmax(val(*logits).data());
                let g = acc!(*logits);
                for (j, (gv, pv)) in g.iter_mut().zip(&p).enumerate() {
                    let target = if j == *label { T::one() } else { T::zero() };
                    *gv += dy[0] * (*pv - target);
                }
            }
            Op::Sum(x) => {
                for g in acc!(*x).iter_mut() {
                    *g += dy[0];
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    for (g, d) in acc!(x).iter_mut().zip(dy) {
                        *g += *d;
                    }
                }
            }
        }
    }
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `node`; zeros when the node was not reached.
    pub fn wrt(&self, node: NodeId) -> Tensor<T> {
        let shape = self.shapes[node.0].clone();
        match &self.grads[node.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds every parameter-leaf gradient into the matching gradient buffer
    /// of `store`. Leaves referring to the same parameter sum up.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(node, param) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                for (dst, src) in store.get_mut(param).grad_mut().iter_mut().zip(g) {
                    *dst += *src;
                }
            }
        }
    }
}
