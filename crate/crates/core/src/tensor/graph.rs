use std::collections::HashMap;

use super::kernels::{all_finite, gelu_grad, gelu_with_tanh, gemm, gemm_view, log_softmax_row, softmax_row, View};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows that attend only to each other (one sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Reshape(NodeId, Vec<usize>),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    KlDiv {
        teacher: NodeId,
        student: NodeId,
        temperature: f64,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Probs(Vec<f64>),
    Kl { teacher: Vec<f64>, student: Vec<f64> },
    Attention(Vec<f64>),
    Tanh(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
    saved: Saved,
}

/// Gradients of a scalar loss with respect to every parameter node, keyed by
/// parameter name in creation order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Adds or replaces the gradient for `name`.
    pub fn insert(&mut self, name: &str, grad: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = grad,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), grad));
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Define-by-run computation graph. Nodes are appended in topological order,
/// so the node list itself is the evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    evaluated: bool,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
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

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::KlDiv { student, .. } => self.nodes[student.0].needs_grad,
            other => inputs_of(other).iter().any(|id| self.nodes[id.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value: None,
            needs_grad,
            saved: Saved::None,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input. Rebindable by name through [`Graph::forward_with`].
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Input);
        self.nodes[id.0].value = Some(value);
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Trainable leaf; `backward` returns a gradient for every param node.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Param(name.to_string()));
        self.nodes[id.0].value = Some(value);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// `x[.., n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(x, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows { x, rows })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Mean cross-entropy of `logits[batch, classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::CrossEntropy { logits, labels })
    }

    /// Batch mean of `KL(softmax(teacher/T) || softmax(student/T))`.
    /// No gradient flows into `teacher`.
    pub fn kl_div(&mut self, teacher: NodeId, student: NodeId, temperature: f64) -> NodeId {
        self.push(Op::KlDiv {
            teacher,
            student,
            temperature,
        })
    }

    /// Multi-head scaled dot-product attention restricted to segments: rows
    /// of one segment attend only to rows of the same segment.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
    ) -> NodeId {
        self.push(Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
        })
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .and_then(|n| n.value.as_ref())
            .filter(|_| self.evaluated || matches!(self.nodes[id.0].op, Op::Input | Op::Param(_)))
            .ok_or(TensorError::NotEvaluated)
    }

    /// Attention probabilities saved by an attention node, laid out per
    /// segment as `[head][query][key]` blocks in segment order.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        if !self.evaluated {
            return None;
        }
        match &self.nodes.get(id.0)?.saved {
            Saved::Attention(a) => Some(a),
            _ => None,
        }
    }

    /// Rebinds named inputs/params, then evaluates every node.
    pub fn forward_with(&mut self, bindings: Vec<(String, Tensor)>) -> Result<()> {
        super::alloc::keep_buffers_mapped();
        for (name, value) in bindings {
            let id = *self
                .inputs
                .get(&name)
                .ok_or_else(|| TensorError::UnknownInput(name.clone()))?;
            let old = self.nodes[id.0].value.as_ref().map(|t| t.shape().to_vec());
            if old.as_deref() != Some(value.shape()) {
                return Err(mismatch(
                    "input",
                    format!("rebinding '{}' from {:?} to {:?}", name, old, value.shape()),
                ));
            }
            self.nodes[id.0].value = Some(value);
        }
        self.forward()
    }

    /// Evaluates every node in insertion order.
    pub fn forward(&mut self) -> Result<()> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let (prev, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let (value, saved) = eval_op(&node.op, prev)?;
            if !all_finite(value.data()) {
                return Err(TensorError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            node.value = Some(value);
            node.saved = saved;
        }
        self.evaluated = true;
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(TensorError::NotEvaluated);
        }
        let loss_value = self.value(loss)?;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                node: loss.0,
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let value = node.value.as_ref().expect("params always hold a value");
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; value.len()]);
                let tensor = Tensor::new(value.shape().to_vec(), data)
                    .expect("gradient buffers match their parameter");
                out.index.insert(name.clone(), out.entries.len());
                out.entries.push((name.clone(), tensor));
            }
        }
        Ok(out)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("evaluated graph")
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let da = slot(grads, *a, av.len());
                    gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                if wants(*b) {
                    let db = slot(grads, *b, bv.len());
                    gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        axpy(slot(grads, id, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
                if wants(*bias) {
                    let n = self.val(*bias).len();
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, *c);
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = node.value.as_ref().unwrap();
                    let n = y.cols();
                    let da = slot(grads, *a, g.len());
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    unreachable!("layernorm saves its normalization")
                };
                let gv = self.val(*gamma).data();
                let n = gv.len();
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, n);
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let db = slot(grads, *beta, n);
                    for gr in g.chunks(n) {
                        axpy(db, gr, 1.0);
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for (r, ((dr, gr), xr)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..n {
                            dr[j] += inv / nf * (nf * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let Saved::Tanh(t) = &node.saved else { unreachable!() };
                    let xv = self.val(*a).data();
                    let da = slot(grads, *a, g.len());
                    for (((d, &gi), &xi), &ti) in da.iter_mut().zip(g).zip(xv).zip(t) {
                        *d += gi * gelu_grad(xi, ti);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = node.value.as_ref().unwrap().data();
                    let da = slot(grads, *a, g.len());
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let tv = self.val(*table);
                    let d = tv.cols();
                    let dt = slot(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(*x) {
                    let xv = self.val(*x);
                    let d = xv.cols();
                    let dx = slot(grads, *x, xv.len());
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(&mut dx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::Reshape(a, _) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let av = self.val(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let da = slot(grads, *a, g.len());
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if wants(*a) {
                    let n = self.val(*a).len();
                    let coef = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    for d in slot(grads, *a, n).iter_mut() {
                        *d += coef;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if wants(*logits) {
                    let Saved::Probs(p) = &node.saved else { unreachable!() };
                    let c = self.val(*logits).cols();
                    let b = labels.len() as f64;
                    let dl = slot(grads, *logits, p.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += g[0] * (p[r * c + j] - onehot) / b;
                        }
                    }
                }
            }
            Op::KlDiv {
                student,
                temperature,
                ..
            } => {
                if wants(*student) {
                    let Saved::Kl { teacher, student: ps } = &node.saved else { unreachable!() };
                    let sv = self.val(*student);
                    let b = sv.rows() as f64;
                    let coef = g[0] / (temperature * b);
                    let ds = slot(grads, *student, sv.len());
                    for ((d, &s), &t) in ds.iter_mut().zip(ps).zip(teacher) {
                        *d += coef * (s - t);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
            } => {
                let Saved::Attention(alpha) = &node.saved else { unreachable!() };
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut ds = Vec::new();
                let mut offset = 0;
                for seg in segments {
                    let l = seg.len;
                    ds.resize(l * l, 0.0);
                    for h in 0..*heads {
                        let a = &alpha[offset + h * l * l..offset + (h + 1) * l * l];
                        let rows = View::row_major(seg.start * d + h * dh, d);
                        let square = View::row_major(0, l);
                        // dA = G V^T, then dS = A * (dA - rowsum(A * dA)) * scale
                        gemm_view(l, dh, l, 1.0, (g, rows), (vd, rows.t()), 0.0, (&mut ds, square));
                        for (dr, ar) in ds.chunks_mut(l).zip(a.chunks(l)) {
                            let dot: f64 = dr.iter().zip(ar).map(|(x, y)| x * y).sum();
                            for (x, &y) in dr.iter_mut().zip(ar) {
                                *x = y * (*x - dot) * scale;
                            }
                        }
                        gemm_view(l, l, dh, 1.0, (a, square.t()), (g, rows), 0.0, (&mut dv, rows));
                        gemm_view(l, l, dh, 1.0, (&ds, square), (kd, rows), 0.0, (&mut dq, rows));
                        gemm_view(l, l, dh, 1.0, (&ds, square.t()), (qd, rows), 0.0, (&mut dk, rows));
                    }
                    offset += heads * l * l;
                }
                for (id, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(id) {
                        accumulate(grads, id, buf);
                    }
                }
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::Gelu(a)
        | Op::Tanh(a)
        | Op::Reshape(a, _)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Embedding { table, .. } => vec![*table],
        Op::GatherRows { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::KlDiv { teacher, student, .. } => vec![*teacher, *student],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `buf` into the gradient slot of `id`, taking ownership when empty.
fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, buf: Vec<f64>) {
    match &mut grads[id.0] {
        Some(g) => axpy(g, &buf, 1.0),
        empty => *empty = Some(buf),
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn eval_op(op: &Op, nodes: &[Node]) -> Result<(Tensor, Saved)> {
    let val = |id: &NodeId| -> &Tensor { nodes[id.0].value.as_ref().expect("topological order") };
    let name = op.name();
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
                return Err(mismatch(
                    name,
                    format!("lhs {:?} vs rhs {:?}: inner dims differ", av.shape(), bv.shape()),
                ));
            }
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            plain(Tensor::new(shape, out)?)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.shape() != bv.shape() {
                return Err(mismatch(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
            }
            let data = if matches!(op, Op::Add(..)) {
                av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect()
            } else {
                av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect()
            };
            plain(Tensor::new(av.shape().to_vec(), data)?)
        }
        Op::AddRow(x, bias) => {
            let (xv, bv) = (val(x), val(bias));
            if bv.len() != xv.cols() {
                return Err(mismatch(
                    name,
                    format!("rows of width {} vs bias of length {}", xv.cols(), bv.len()),
                ));
            }
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(bv.len()) {
                for (r, b) in row.iter_mut().zip(bv.data()) {
                    *r += b;
                }
            }
            plain(Tensor::new(xv.shape().to_vec(), data)?)
        }
        Op::Scale(a, c) => {
            let av = val(a);
            plain(Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?)
        }
        Op::Softmax(a) => {
            let av = val(a);
            let n = av.cols();
            let mut out = vec![0.0; av.len()];
            for (o, x) in out.chunks_mut(n).zip(av.data().chunks(n)) {
                softmax_row(x, o);
            }
            plain(Tensor::new(av.shape().to_vec(), out)?)
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xv, gv, bv) = (val(x), val(gamma), val(beta));
            let n = xv.cols();
            if gv.len() != n || bv.len() != n {
                return Err(mismatch(
                    name,
                    format!("width {} vs gamma {} / beta {}", n, gv.len(), bv.len()),
                ));
            }
            let rows = xv.rows();
            let mut out = vec![0.0; xv.len()];
            let mut xhat = vec![0.0; xv.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let xr = &xv.data()[r * n..(r + 1) * n];
                let mean = xr.iter().sum::<f64>() / n as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..n {
                    let h = (xr[j] - mean) * inv;
                    xhat[r * n + j] = h;
                    out[r * n + j] = gv.data()[j] * h + bv.data()[j];
                }
            }
            Ok((
                Tensor::new(xv.shape().to_vec(), out)?,
                Saved::LayerNorm { xhat, inv_std },
            ))
        }
        Op::Gelu(a) => {
            let av = val(a);
            let (out, t): (Vec<f64>, Vec<f64>) = av.data().iter().map(|&x| gelu_with_tanh(x)).unzip();
            Ok((Tensor::new(av.shape().to_vec(), out)?, Saved::Tanh(t)))
        }
        Op::Tanh(a) => {
            let av = val(a);
            plain(Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.tanh()).collect())?)
        }
        Op::Embedding { table, ids } => {
            let tv = val(table);
            let (v, d) = (tv.rows(), tv.cols());
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::IndexOutOfRange {
                        op: name,
                        index: id,
                        limit: v,
                    });
                }
                out.extend_from_slice(tv.row(id));
            }
            plain(Tensor::new(vec![ids.len(), d], out)?)
        }
        Op::GatherRows { x, rows } => {
            let xv = val(x);
            let (m, d) = (xv.rows(), xv.cols());
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= m {
                    return Err(TensorError::IndexOutOfRange {
                        op: name,
                        index: r,
                        limit: m,
                    });
                }
                out.extend_from_slice(xv.row(r));
            }
            plain(Tensor::new(vec![rows.len(), d], out)?)
        }
        Op::Reshape(a, shape) => {
            let av = val(a);
            if shape.iter().product::<usize>() != av.len() {
                return Err(mismatch(name, format!("{:?} -> {:?}", av.shape(), shape)));
            }
            plain(Tensor::new(shape.clone(), av.data().to_vec())?)
        }
        Op::Transpose(a) => {
            let av = val(a);
            if av.shape().len() != 2 {
                return Err(mismatch(name, format!("expected 2-d, got {:?}", av.shape())));
            }
            let (m, n) = (av.rows(), av.cols());
            let mut out = vec![0.0; av.len()];
            for r in 0..m {
                for c in 0..n {
                    out[c * m + r] = av.data()[r * n + c];
                }
            }
            plain(Tensor::new(vec![n, m], out)?)
        }
        Op::Sum(a) => plain(Tensor::scalar(val(a).data().iter().sum())),
        Op::Mean(a) => {
            let av = val(a);
            if av.is_empty() {
                return Err(mismatch(name, "empty tensor".into()));
            }
            plain(Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64))
        }
        Op::CrossEntropy { logits, labels } => {
            let lv = val(logits);
            let (b, c) = (lv.rows(), lv.cols());
            if labels.len() != b || b == 0 {
                return Err(mismatch(
                    name,
                    format!("{} logit rows vs {} labels", b, labels.len()),
                ));
            }
            let mut logp = vec![0.0; c];
            let mut probs = vec![0.0; lv.len()];
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(TensorError::IndexOutOfRange {
                        op: name,
                        index: y,
                        limit: c,
                    });
                }
                log_softmax_row(lv.row(r), &mut logp);
                total -= logp[y];
                for j in 0..c {
                    probs[r * c + j] = logp[j].exp();
                }
            }
            Ok((Tensor::scalar(total / b as f64), Saved::Probs(probs)))
        }
        Op::KlDiv {
            teacher,
            student,
            temperature,
        } => {
            let (tv, sv) = (val(teacher), val(student));
            if tv.shape() != sv.shape() || tv.is_empty() {
                return Err(mismatch(
                    name,
                    format!("teacher {:?} vs student {:?}", tv.shape(), sv.shape()),
                ));
            }
            let (b, c) = (tv.rows(), tv.cols());
            let mut lt = vec![0.0; c];
            let mut ls = vec![0.0; c];
            let mut scaled = vec![0.0; c];
            let mut pt = vec![0.0; tv.len()];
            let mut ps = vec![0.0; sv.len()];
            let mut total = 0.0;
            for r in 0..b {
                for (s, x) in scaled.iter_mut().zip(tv.row(r)) {
                    *s = x / temperature;
                }
                log_softmax_row(&scaled, &mut lt);
                for (s, x) in scaled.iter_mut().zip(sv.row(r)) {
                    *s = x / temperature;
                }
                log_softmax_row(&scaled, &mut ls);
                for j in 0..c {
                    let p = lt[j].exp();
                    pt[r * c + j] = p;
                    ps[r * c + j] = ls[j].exp();
                    total += p * (lt[j] - ls[j]);
                }
            }
            Ok((
                Tensor::scalar(total / b as f64),
                Saved::Kl {
                    teacher: pt,
                    student: ps,
                },
            ))
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
        } => {
            let (qv, kv, vv) = (val(q), val(k), val(v));
            if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
                return Err(mismatch(
                    name,
                    format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
                ));
            }
            let (rows, d) = (qv.rows(), qv.cols());
            if *heads == 0 || d % heads != 0 {
                return Err(mismatch(name, format!("width {} not divisible by {} heads", d, heads)));
            }
            if let Some(seg) = segments.iter().find(|s| s.start + s.len > rows) {
                return Err(mismatch(
                    name,
                    format!("segment {}..{} exceeds {} rows", seg.start, seg.start + seg.len, rows),
                ));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
            let mut alpha = vec![0.0; total];
            let mut out = vec![0.0; qv.len()];
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let mut scores = Vec::new();
            let mut offset = 0;
            for seg in segments {
                let l = seg.len;
                scores.resize(l * l, 0.0);
                for h in 0..*heads {
                    let view = View::row_major(seg.start * d + h * dh, d);
                    let square = View::row_major(0, l);
                    gemm_view(l, dh, l, scale, (qd, view), (kd, view.t()), 0.0, (&mut scores, square));
                    let a = &mut alpha[offset + h * l * l..offset + (h + 1) * l * l];
                    for (ar, sr) in a.chunks_mut(l).zip(scores.chunks(l)) {
                        softmax_row(sr, ar);
                    }
                    gemm_view(l, l, dh, 1.0, (a, square), (vd, view), 0.0, (&mut out, view));
                }
                offset += heads * l * l;
            }
            Ok((Tensor::new(vec![rows, d], out)?, Saved::Attention(alpha)))
        }
    }
}
