//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{gelu_derivative, gelu_scalar, gemm, softmax_row, View};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Additive pre-softmax penalty for disallowed attention links.
pub const MASK_PENALTY: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar multiply-accumulate counter fed by `matmul` and `attention`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    macs: u64,
}

impl MacCounter {
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset(&mut self) {
        self.macs = 0;
    }

    fn record(&mut self, n: usize) {
        self.macs += n as u64;
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, Default)]
pub enum AttnMask {
    #[default]
    None,
    /// Query `i` sees keys `0..=i` (requires equal lengths).
    Causal,
    /// Row-major `Lq x Lk` table, `true` = allowed.
    Allow(Arc<Vec<bool>>),
}

impl AttnMask {
    fn allowed(&self, i: usize, j: usize, lk: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Allow(t) => t[i * lk + j],
        }
    }
}

/// Deliberate gradient corruption, used to prove the gradient checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GeluDerivative,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Select {
        x: NodeId,
        index: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// One forward/backward pass worth of recorded computation.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    store: Option<&'p ParamStore>,
    bound: Vec<Option<NodeId>>,
    counter: MacCounter,
    grad_enabled: bool,
    fault: Option<Fault>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            store: None,
            bound: Vec::new(),
            counter: MacCounter::default(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// Graph whose parameters come from `store` and receive gradients.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            bound: vec![None; store.len()],
            ..Self::new()
        }
    }

    /// Forward-only graph: nothing requires grad, no backward caches are kept.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn counter(&self) -> &MacCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut MacCounter {
        &mut self.counter
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` w.r.t. `id`; `None` if it does not require grad.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        self.grad(id)
            .map(|g| Tensor::from_parts(self.shape(id).to_vec(), g.to_vec()))
    }

    fn push(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> NodeId {
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Arc::new(value), requires_grad, op)
    }

    fn push_node(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_node(Arc::new(t), false, Op::Leaf)
    }

    /// Differentiable leaf (gradient is reported after `backward`).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = self.grad_enabled;
        self.push_node(Arc::new(t), rg, Op::Leaf)
    }

    /// Binds a stored parameter; repeated binds of the same id share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.index()] {
            return n;
        }
        let store = self.store.expect("graph has no parameter store");
        let rg = self.grad_enabled;
        let n = self.push_node(store.shared(id), rg, Op::Leaf);
        self.bound[id.index()] = Some(n);
        n
    }

    /// Parameter gradients from the last backward, in store order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.bound.iter().enumerate().filter_map(move |(i, n)| {
            let n = (*n)?;
            self.grad(n).map(|g| (ParamId(i), g))
        })
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::rows(self.value(a).data(), k),
            View::rows(self.value(b).data(), n),
            &mut out,
            n,
            0.0,
        );
        self.counter.record(m * k * n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, &[a], Op::Scale(a, c))
    }

    /// Adds a `[n]` vector to every row of an `[.., n]` tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.numel() != n {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, &[a, row], Op::AddRow(a, row)))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, &[a], Op::Gelu(a))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 {
            return Err(Error::EmptyDimension("layer_norm"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            t,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = tx.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[(o * len + j) * inner + i];
                }
                softmax_row(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *b;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis }))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q [Lq x d]`, `k [Lk x d]`, `v [Lk x d]`; heads split the width evenly.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &AttnMask) -> Result<NodeId> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::dim("attention", &sq, &sk));
        }
        let (lq, d, lk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        match mask {
            AttnMask::Causal if lq != lk => return Err(Error::dim("causal attention", &sq, &sk)),
            AttnMask::Allow(t) if t.len() != lq * lk => {
                return Err(Error::dim("attention mask", &[lq, lk], &[t.len()]))
            }
            _ => {}
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        {
            let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..heads {
                let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    View::cols(tq, d, h * dh),
                    View::cols(tk, d, h * dh).t(),
                    p,
                    lk,
                    0.0,
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if !mask.allowed(i, j, lk) {
                            *s += MASK_PENALTY;
                        }
                    }
                    softmax_row(row);
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    View::rows(p, lk),
                    View::cols(tv, d, h * dh),
                    &mut out[h * dh..],
                    d,
                    0.0,
                );
            }
        }
        self.counter.record(2 * lq * lk * d);
        let t = Tensor::from_parts(vec![lq, d], out);
        Ok(self.push(t, &[q, k, v], Op::Attention { q, k, v, heads, probs }))
    }

    /// Stacks 2-D tensors with equal widths along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let w = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != w {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_parts(vec![rows, w], data);
        Ok(self.push(t, parts, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 2 || len == 0 || start + len > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let w = t.cols();
        let data = t.data()[start * w..(start + len) * w].to_vec();
        let t = Tensor::from_parts(vec![len, w], data);
        Ok(self.push(t, &[x], Op::SliceRows { x, start }))
    }

    /// Embedding lookup: row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::Contract("gather of no rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::dim("gather_rows", t.shape(), &[bad]));
        }
        let w = t.cols();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let t = Tensor::from_parts(vec![ids.len(), w], data);
        Ok(self.push(
            t,
            &[table],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i` of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if targets.iter().any(|&c| c >= v) {
            return Err(Error::Contract("cross_entropy target out of vocabulary".into()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
            softmax_row(row);
        }
        let t = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            t,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Scalar element at flat `index`.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::dim("select", t.shape(), &[index]));
        }
        let v = t.data()[index];
        Ok(self.push(Tensor::scalar(v), &[x], Op::Select { x, index }))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Clears gradients from any earlier sweep.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (g, n) in self.grads.iter_mut().zip(&self.nodes) {
            *g = match (n.requires_grad, &n.op) {
                (true, Op::Leaf) => Some(vec![0.0; n.value.numel()]),
                _ => None,
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let fault = self.fault;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g, fault);
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[id.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn acc_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, src: &[f64]) {
    if let Some(dst) = slot(nodes, grads, id) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64], fault: Option<Fault>) {
    let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(m, n, k, View::rows(g, n), View::rows(tb.data(), n).t(), da, k, 1.0);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(k, m, n, View::rows(ta.data(), k).t(), View::rows(g, n), db, n, 1.0);
            }
        }
        Op::Add(a, b) => {
            acc_into(nodes, grads, *a, g);
            acc_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            acc_into(nodes, grads, *a, g);
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, s) in db.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, s), y) in da.iter_mut().zip(g).zip(tb.data()) {
                    *d += s * y;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, s), x) in db.iter_mut().zip(g).zip(ta.data()) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, s) in da.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::AddRow(a, row) => {
            acc_into(nodes, grads, *a, g);
            let n = val(*row).numel();
            if let Some(dr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    for (d, s) in dr.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let ta = val(*a);
            if let Some(da) = slot(nodes, grads, *a) {
                let corrupt = fault == Some(Fault::GeluDerivative);
                for ((d, s), &x) in da.iter_mut().zip(g).zip(ta.data()) {
                    let mut dx = gelu_derivative(x);
                    if corrupt {
                        dx *= 1.1;
                    }
                    *d += s * dx;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let tg = val(*gain);
            let d = tg.numel();
            let rows = rstd.len();
            if let Some(dg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..d {
                        dxhat[j] = g[r * d + j] * tg.data()[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[r * d + j];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let (lq, d) = (tq.shape()[0], tq.shape()[1]);
            let lk = tk.shape()[0];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; lq * d];
            let mut dk = vec![0.0; lk * d];
            let mut dv = vec![0.0; lk * d];
            let mut ds = vec![0.0; lq * lk];
            for h in 0..*heads {
                let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                let go = View::cols(g, d, h * dh);
                gemm(lq, dh, lk, go, View::cols(tv.data(), d, h * dh).t(), &mut ds, lk, 0.0);
                gemm(lk, lq, dh, View::rows(p, lk).t(), go, &mut dv[h * dh..], d, 1.0);
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut ds[i * lk..(i + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dsv, pv) in dr.iter_mut().zip(pr) {
                        *dsv = pv * (*dsv - dot) * scale;
                    }
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    View::rows(&ds, lk),
                    View::cols(tk.data(), d, h * dh),
                    &mut dq[h * dh..],
                    d,
                    1.0,
                );
                gemm(
                    lk,
                    lq,
                    dh,
                    View::rows(&ds, lk).t(),
                    View::cols(tq.data(), d, h * dh),
                    &mut dk[h * dh..],
                    d,
                    1.0,
                );
            }
            acc_into(nodes, grads, *q, &dq);
            acc_into(nodes, grads, *k, &dk);
            acc_into(nodes, grads, *v, &dv);
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).numel();
                acc_into(nodes, grads, *p, &g[off..off + n]);
                off += n;
            }
        }
        Op::SliceRows { x, start } => {
            let w = node.value.cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, s) in dx[start * w..].iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let w = node.value.cols();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..w {
                        dt[i * w + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = val(*logits).cols();
            let scale = g[0] / targets.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, &c) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == c { 1.0 } else { 0.0 };
                        dl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Select { x, index } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx[*index] += g[0];
            }
        }
    }
}
