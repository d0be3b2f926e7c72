//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every learnable computation in the tracker runs through [`Tape`]. Shapes
//! are at most two-dimensional (vectors are 1 x n row vectors); the model
//! never needs more. Ops panic on shape violations and verify that every
//! produced value is finite.

pub mod checkpoint;
mod gradcheck;
mod optim;

pub use gradcheck::check_gradients;
pub use optim::{AdamW, Bindings, ParamStore, PId};

/// A plain tensor value: row-major data plus a 1-D or 2-D shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 2 && shape.iter().all(|&d| d > 0),
            "tensor shape must be 1-D or 2-D with positive dims, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(vec![rows, cols], vec![0.0; rows * cols])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// 1 x n row vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![1, data.len()], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v])
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// [n,d] + [1,d], the bias add of a linear layer.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Powf(NodeId, f64),
    Abs(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SumAll(NodeId),
    MeanRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records forward operations and replays them in reverse for gradients.
///
/// A tape is single-owner: one forward/backward pass at a time. Nodes whose
/// inputs carry no gradient requirement are stored as plain leaves, so
/// inference runs record no backward work.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a leaf; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any was
    /// accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        assert!(
            value.data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn record(&mut self, value: Tensor, op: Op) -> NodeId {
        let rg = op_inputs(&op).iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push(value, rg, op)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims disagree: {m}x{ka} vs {kb}x{n}");
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, ka, n);
        self.record(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.record(Tensor::matrix(c, r, out), Op::Transpose(a))
    }

    fn zip_same_shape(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise shapes disagree: {:?} vs {:?}",
            self.value(a).shape,
            self.value(b).shape
        );
        let out: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.record(Tensor::matrix(r, c, out), op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same_shape(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same_shape(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same_shape(a, b, Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    /// Add a 1 x d row vector to every row of an n x d matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, d) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert!(rr == 1 && rc == d, "bias row must be 1x{d}, got {rr}x{rc}");
        let rowv = self.value(row).data.clone();
        let out: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rowv[i % d])
            .collect();
        self.record(Tensor::matrix(n, d, out), Op::AddRow(a, row))
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.value(a).data.iter().map(|&x| f(x)).collect();
        self.record(Tensor::matrix(r, c, out), op)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.map(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        self.map(a, Op::AddConst(a), |x| x + k)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid_stable)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Ln(a), f64::ln)
    }

    /// Elementwise power with a constant exponent; base must stay positive.
    pub fn powf(&mut self, a: NodeId, exp: f64) -> NodeId {
        self.map(a, Op::Powf(a, exp), |x| x.powf(exp))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Cos(a), f64::cos)
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows), stabilized by
    /// max subtraction. Masked lanes get weight exactly 0 and are never read
    /// for the stabilizing max, so a masked entry cannot perturb the output.
    pub fn softmax(&mut self, a: NodeId, axis: usize, mask: Option<&[bool]>) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(axis <= 1, "softmax axis must be 0 or 1, got {axis}");
        let lane = if axis == 1 { c } else { r };
        if let Some(m) = mask {
            assert_eq!(m.len(), lane, "mask length {} != lane {}", m.len(), lane);
            assert!(m.iter().any(|&v| v), "softmax mask excludes every entry");
        }
        let out = softmax_raw(&self.value(a).data, r, c, axis, mask);
        self.record(
            Tensor::matrix(r, c, out),
            Op::Softmax {
                x: a,
                axis,
                mask: mask.map(|m| m.to_vec()),
            },
        )
    }

    /// Per-row normalization over the last dimension, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d), "gamma must be 1x{d}");
        assert_eq!(self.shape(beta), (1, d), "beta must be 1x{d}");
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let src = &self.value(x).data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.record(
            Tensor::matrix(n, d, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Mean over rows: n x d -> 1 x d.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.shape(a);
        let src = &self.value(a).data;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += src[i * d + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        self.record(Tensor::matrix(1, d, out), Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let d = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, d, "concat_rows column mismatch: {c} vs {d}");
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        self.record(Tensor::matrix(rows, d, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, n, "concat_cols row mismatch: {r} vs {n}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.record(Tensor::matrix(n, total, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (n, d) = self.shape(a);
        assert!(start + len <= n, "row slice {start}+{len} out of {n}");
        let data = self.value(a).data[start * d..(start + len) * d].to_vec();
        self.record(Tensor::matrix(len, d, data), Op::SliceRows { x: a, start, len })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (n, d) = self.shape(a);
        assert!(start + len <= d, "col slice {start}+{len} out of {d}");
        let src = &self.value(a).data;
        let mut data = vec![0.0; n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * d + start..i * d + start + len]);
        }
        self.record(Tensor::matrix(n, len, data), Op::SliceCols { x: a, start, len })
    }

    /// Reinterpret the row-major data under a new 2-D shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.numel(), rows * cols, "reshape {rows}x{cols} on {} elems", v.numel());
        let data = v.data.clone();
        self.record(Tensor::matrix(rows, cols, data), Op::Reshape(a))
    }

    /// Copy of the value with the gradient path cut.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Grad buffers are reset first,
    /// so repeated calls on the same tape are reproducible; within one sweep
    /// fan-out accumulates additively.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape
        );
        assert!(!self.nodes.is_empty(), "backward on an empty tape");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let gout = self.nodes[id].grad.clone().unwrap();
            self.propagate(id, &op, &gout);
        }
    }

    fn accumulate(&mut self, target: NodeId, contrib: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let numel = self.nodes[target.0].value.numel();
        let g = self.nodes[target.0]
            .grad
            .get_or_insert_with(|| vec![0.0; numel]);
        for (a, b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn propagate(&mut self, out: usize, op: &Op, gout: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                let at = transpose_raw(&self.nodes[a.0].value.data, m, k);
                let bt = transpose_raw(&self.nodes[b.0].value.data, k, n);
                let da = matmul_raw(gout, &bt, m, n, k);
                let db = matmul_raw(&at, gout, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(a);
                let da = transpose_raw(gout, c, r);
                self.accumulate(a, &da);
            }
            Op::Add(a, b) => {
                self.accumulate(a, gout);
                self.accumulate(b, gout);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, gout);
                let db: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accumulate(b, &db);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[b.0].value.data)
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value.data;
                let av = &self.nodes[a.0].value.data;
                let da: Vec<f64> = gout.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = gout
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, gout);
                let (n, d) = self.shape(a);
                let mut dr = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] += gout[i * d + j];
                    }
                }
                self.accumulate(row, &dr);
            }
            Op::Scale(a, k) => {
                let da: Vec<f64> = gout.iter().map(|g| g * k).collect();
                self.accumulate(a, &da);
            }
            Op::AddConst(a) => self.accumulate(a, gout),
            Op::Neg(a) => {
                let da: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[out].value.data;
                let da: Vec<f64> = gout
                    .iter()
                    .zip(y)
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &x)| g / x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Powf(a, e) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &x)| g * e * x.powf(e - 1.0))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &x)| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sin(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &x)| g * x.cos())
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Cos(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &x)| -g * x.sin())
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Min(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let mut da = vec![0.0; gout.len()];
                let mut db = vec![0.0; gout.len()];
                for i in 0..gout.len() {
                    if av[i] <= bv[i] {
                        da[i] = gout[i];
                    } else {
                        db[i] = gout[i];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Max(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let mut da = vec![0.0; gout.len()];
                let mut db = vec![0.0; gout.len()];
                for i in 0..gout.len() {
                    if av[i] >= bv[i] {
                        da[i] = gout[i];
                    } else {
                        db[i] = gout[i];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Softmax { x, axis, ref mask } => {
                let (r, c) = self.shape(x);
                let y = &self.nodes[out].value.data;
                let mut dx = vec![0.0; r * c];
                let (lanes, lane_len, stride, base) = if axis == 1 {
                    (r, c, 1usize, c)
                } else {
                    (c, r, c, 1usize)
                };
                for lane in 0..lanes {
                    let idx = |k: usize| lane * base + k * stride;
                    let mut dot = 0.0;
                    for k in 0..lane_len {
                        dot += gout[idx(k)] * y[idx(k)];
                    }
                    for k in 0..lane_len {
                        if mask.as_ref().is_some_and(|m| !m[k]) {
                            continue;
                        }
                        dx[idx(k)] = y[idx(k)] * (gout[idx(k)] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, d) = self.shape(x);
                let xv = &self.nodes[x.0].value.data;
                let g = &self.nodes[gamma.0].value.data;
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let row = &xv[i * d..(i + 1) * d];
                    let go = &gout[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = go.iter().zip(g).map(|(o, gg)| o * gg).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += go[j] * xhat[j];
                        dbeta[j] += go[j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::SumAll(a) => {
                let numel = self.nodes[a.0].value.numel();
                let da = vec![gout[0]; numel];
                self.accumulate(a, &da);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.shape(a);
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = gout[j] / n as f64;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatRows(ref parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let (r, d) = self.shape(p);
                    let dp = gout[offset..offset + r * d].to_vec();
                    self.accumulate(p, &dp);
                    offset += r * d;
                }
            }
            Op::ConcatCols(ref parts) => {
                let parts = parts.clone();
                let n = self.shape(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.shape(p);
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&gout[i * total + offset..i * total + offset + w]);
                    }
                    self.accumulate(p, &dp);
                    offset += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (n, d) = self.shape(x);
                let mut dx = vec![0.0; n * d];
                dx[start * d..(start + len) * d].copy_from_slice(gout);
                self.accumulate(x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (n, d) = self.shape(x);
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape(a) => self.accumulate(a, gout),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Neg(..) => "neg",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Ln(..) => "ln",
        Op::Powf(..) => "powf",
        Op::Abs(..) => "abs",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::Min(..) => "minimum",
        Op::Max(..) => "maximum",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SumAll(..) => "sum_all",
        Op::MeanRows(..) => "mean_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape(..) => "reshape",
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::Min(a, b)
        | Op::Max(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Neg(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Ln(a)
        | Op::Powf(a, _)
        | Op::Abs(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::SumAll(a)
        | Op::MeanRows(a)
        | Op::Reshape(a)
        | Op::SliceRows { x: a, .. }
        | Op::SliceCols { x: a, .. }
        | Op::Softmax { x: a, .. } => vec![a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::ConcatRows(ref v) | Op::ConcatCols(ref v) => v.clone(),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_raw(src: &[f64], r: usize, c: usize, axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    let (lanes, lane_len, stride, base) = if axis == 1 {
        (r, c, 1usize, c)
    } else {
        (c, r, c, 1usize)
    };
    for lane in 0..lanes {
        let idx = |k: usize| lane * base + k * stride;
        let mut mx = f64::NEG_INFINITY;
        for k in 0..lane_len {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            mx = mx.max(src[idx(k)]);
        }
        let mut denom = 0.0;
        for k in 0..lane_len {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            let e = (src[idx(k)] - mx).exp();
            out[idx(k)] = e;
            denom += e;
        }
        for k in 0..lane_len {
            out[idx(k)] /= denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(3, 3, (1..=9).map(f64::from).collect()));
        let eye = t.constant(Tensor::matrix(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let prod = t.matmul(eye, a);
        assert_eq!(t.value(prod).data, t.value(a).data);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 1, vec![2.0]));
        let b = t.constant(Tensor::matrix(1, 1, vec![3.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).data, vec![6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = rand_vec(&mut rng, 6);
        let b = rand_vec(&mut rng, 6);
        // Independent brute-force oracle.
        let mut expect = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expect[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let an = t.constant(Tensor::matrix(2, 3, a));
        let bn = t.constant(Tensor::matrix(3, 2, b));
        let c = t.matmul(an, bn);
        for (got, want) in t.value(c).data.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    #[should_panic(expected = "inner dims disagree")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 2));
        t.matmul(a, b);
    }

    #[test]
    fn softmax_uniform_and_single() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.4, 0.4, 0.4]));
        let y = t.softmax(x, 1, None);
        for v in &t.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t.constant(Tensor::vector(vec![5.0]));
        let ys = t.softmax(s, 1, None);
        assert_eq!(t.value(ys).data, vec![1.0]);
    }

    #[test]
    fn softmax_hand_evaluated() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 2.0f64.ln()]));
        let y = t.softmax(x, 1, None);
        let got = &t.value(y).data;
        assert!((got[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((got[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_lane_gets_zero_and_ignores_value() {
        let mut t = Tape::new();
        let mask = vec![true, false, true];
        let x1 = t.constant(Tensor::vector(vec![0.3, 9.9, -0.2]));
        let y1 = t.softmax(x1, 1, Some(&mask));
        let x2 = t.constant(Tensor::vector(vec![0.3, -777.0, -0.2]));
        let y2 = t.softmax(x2, 1, Some(&mask));
        assert_eq!(t.value(y1).data, t.value(y2).data);
        assert_eq!(t.value(y1).data[1], 0.0);
        let sum: f64 = t.value(y1).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, 3.0, 3.0, 3.0]));
        let g = t.constant(Tensor::vector(vec![1.0; 4]));
        let b = t.constant(Tensor::vector(vec![0.0; 4]));
        let y = t.layer_norm(x, g, b, 1e-5);
        for v in &t.value(y).data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_closed_form_pair() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, -1.0]));
        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.layer_norm(x, g, b, 1e-14);
        let got = &t.value(y).data;
        assert!((got[0] - 1.0).abs() < 1e-6);
        assert!((got[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gamma_broadcasts_beta() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![5.0, -2.0, 0.4, 1.0, 2.0, 3.0]));
        let g = t.constant(Tensor::vector(vec![0.0; 3]));
        let b = t.constant(Tensor::vector(vec![0.7, -0.3, 0.1]));
        let y = t.layer_norm(x, g, b, 1e-5);
        assert_eq!(t.value(y).data, vec![0.7, -0.3, 0.1, 0.7, -0.3, 0.1]);
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 3.0, -2.0]));
        let s = t.sigmoid(x);
        let got = &t.value(s).data;
        assert_eq!(got[0], 0.5);
        assert!((got[1] - 0.952574126822433).abs() < 1e-12);
        let r = t.relu(x);
        assert_eq!(t.value(r).data, vec![0.0, 3.0, 0.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x);
        let loss = t.sum_all(sq);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]), true);
        let a = t.scale(x, 2.0);
        let b = t.scale(x, 5.0);
        let s = t.add(a, b);
        let loss = t.sum_all(s);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_is_deterministic_across_runs() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, rand_vec(&mut rng, 6)), true);
        let w = t.leaf(Tensor::matrix(3, 2, rand_vec(&mut rng, 6)), true);
        let y = t.matmul(x, w);
        let sm = t.softmax(y, 1, None);
        let loss = t.sum_all(sm);
        t.backward(loss);
        let g1 = t.grad(x).unwrap().to_vec();
        let g1w = t.grad(w).unwrap().to_vec();
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), g1.as_slice());
        assert_eq!(t.grad(w).unwrap(), g1w.as_slice());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.scale(x, 2.0);
        t.backward(y);
    }

    #[test]
    fn inference_records_no_backward_work() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 2));
        let b = t.constant(Tensor::zeros(2, 2));
        let c = t.matmul(a, b);
        assert!(!t.requires_grad(c));
        assert!(matches!(t.nodes[c.0].op, Op::Leaf));
    }

    #[test]
    fn matmul_chain_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let point = rand_vec(&mut rng, 12);
        let err = check_gradients(
            |t, x| {
                let a = t.slice_cols(x, 0, 6);
                let a = t.reshape(a, 2, 3);
                let b = t.slice_cols(x, 6, 6);
                let b = t.reshape(b, 3, 2);
                let c = t.matmul(a, b);
                let d = t.matmul(c, c);
                t.sum_all(d)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn softmax_log_composite_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let point = rand_vec(&mut rng, 8);
        let err = check_gradients(
            |t, x| {
                let sm = t.softmax(x, 1, None);
                let eps = t.add_const(sm, 1e-9);
                let lg = t.ln(eps);
                let w = t.mul(sm, lg);
                let s = t.sum_all(w);
                t.neg(s)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn quadratic_gradcheck_is_tight() {
        let point = vec![0.3, -0.7, 1.2];
        let err = check_gradients(
            |t, x| {
                let sq = t.mul(x, x);
                t.sum_all(sq)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn assorted_op_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        for trial in 0..10 {
            let point = rand_vec(&mut rng, 10);
            let err = check_gradients(
                |t, x| {
                    let a = t.slice_cols(x, 0, 5);
                    let b = t.slice_cols(x, 5, 5);
                    let m = t.maximum(a, b);
                    let mn = t.minimum(a, b);
                    let d = t.sub(m, mn);
                    let ab = t.abs(d);
                    let shifted = t.add_const(ab, 1.5);
                    let p = t.powf(shifted, 2.5);
                    let sg = t.sigmoid(p);
                    let cat = t.concat_cols(&[sg, mn]);
                    t.sum_all(cat)
                },
                &point,
                1e-5,
            );
            assert!(err < 1e-4, "trial {trial} rel err {err}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(19);
        let point = rand_vec(&mut rng, 12);
        let err = check_gradients(
            |t, x| {
                let xs = t.slice_cols(x, 0, 6);
                let xm = t.reshape(xs, 2, 3);
                let g = t.slice_cols(x, 6, 3);
                let b = t.slice_cols(x, 9, 3);
                let y = t.layer_norm(xm, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let point = rand_vec(&mut rng, 8);
        let mask = vec![true, false, true, true];
        let err = check_gradients(
            move |t, x| {
                let m = t.reshape(x, 2, 4);
                let y = t.softmax(m, 1, Some(&mask));
                let w = t.mul(y, m);
                t.sum_all(w)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn mean_rows_and_div_gradients() {
        let mut rng = StdRng::seed_from_u64(29);
        let mut point = rand_vec(&mut rng, 8);
        for v in point.iter_mut().skip(6) {
            *v += 3.0; // keep divisors away from zero
        }
        let err = check_gradients(
            |t, x| {
                let a = t.slice_cols(x, 0, 6);
                let m = t.reshape(a, 3, 2);
                let mr = t.mean_rows(m);
                let d = t.slice_cols(x, 6, 2);
                let q = t.div(mr, d);
                t.sum_all(q)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_results_are_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0]));
        t.ln(x);
    }
}
