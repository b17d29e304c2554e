//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape from the loss towards the leaves in exact reverse order of
//! recording, so gradients at fan-out points accumulate additively.

use std::borrow::Cow;
use std::sync::LazyLock;

use super::kernels::{gemm, log_softmax_in_place, sigmoid};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::{Error, Result};

static NO_PARAMS: LazyLock<ParamStore> = LazyLock::new(ParamStore::new);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    SliceCols {
        src: NodeId,
        start: usize,
    },
    SliceRows {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    LstmCell {
        gates: NodeId,
        c_prev: NodeId,
    },
    LogSoftmax(NodeId),
    Attention {
        query: NodeId,
        keys: NodeId,
        values: NodeId,
        batch: usize,
        weights: Vec<f64>,
    },
    SmoothedNll {
        logp: NodeId,
        targets: Vec<u32>,
        weights: Vec<f64>,
        eps: f64,
    },
    Sum(NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Parameters are borrowed from one [`ParamStore`];
/// constants may be borrowed or owned.
pub struct Graph<'a> {
    store: &'a ParamStore,
    track: bool,
    nodes: Vec<Node<'a>>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients of one backward pass, for every node that required them.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<NodeId>>,
}

impl NodeGrads {
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|n| self.node(n))
    }

    /// Moves parameter gradients out; parameters not reached get `None`.
    pub fn into_param_grads(mut self) -> Gradients {
        let grads = self
            .params
            .iter()
            .map(|n| n.and_then(|n| self.grads[n.0].take()))
            .collect();
        Gradients { grads }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal op produced consistent shape")
}

impl<'a> Graph<'a> {
    /// A graph whose parameters come from `store`. With `track == false` no
    /// node requires gradients (inference mode).
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Graph {
            store,
            track,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    /// A tracking graph with no parameters, for free-standing computations.
    pub fn detached() -> Graph<'static> {
        Graph::new(&NO_PARAMS, true)
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Attention weights (`queries x steps`) recorded by an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Cow<'a, Tensor>,
        op: Op,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// The node for a registered parameter; created on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let store = self.store;
        let node = self
            .push("param", Cow::Borrowed(store.get(id)), Op::Leaf, true)
            .expect("parameters are finite");
        self.param_nodes[id.0] = Some(node);
        node
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push("input", Cow::Owned(t), Op::Leaf, false)
    }

    /// A constant leaf borrowed for the graph's lifetime.
    pub fn input_ref(&mut self, t: &'a Tensor) -> Result<NodeId> {
        self.push("input", Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A non-parameter leaf that still receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<NodeId> {
        self.push("variable", Cow::Owned(t), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", Cow::Owned(mat(m, n, out)), Op::MatMul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::shape("add_bias", format!("{m}x{n} + {}", b.len())));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Cow::Owned(mat(m, n, out)), Op::AddBias(x, bias), rg)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) || ta.len() != tb.len() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, n) = dims(ta);
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(name, Cow::Owned(mat(m, n, out)), op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(name, Cow::Owned(mat(m, n, out)), op, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.map("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    /// Gathers rows of `table` (`vocab x dim`) for each id.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = dims(self.value(table));
        if ids.is_empty() {
            return Err(Error::Empty("embedding id list"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let rg = self.rg(&[table]);
        self.push(
            "embed",
            Cow::Owned(mat(ids.len(), d, out)),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(
            "slice_cols",
            Cow::Owned(mat(m, len, out)),
            Op::SliceCols { src: x, start },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "slice_rows",
            Cow::Owned(mat(len, n, out)),
            Op::SliceRows { src: x, start },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols input"))?;
        let m = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            Cow::Owned(mat(m, n, out)),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows input"))?;
        let n = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let m: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            Cow::Owned(mat(m, n, out)),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Fused LSTM cell nonlinearity. `gates` is `b x 4H` laid out as
    /// input, forget, candidate, output pre-activations. Returns `b x 2H`
    /// holding `[h' | c']`.
    pub fn lstm_cell(&mut self, gates: NodeId, c_prev: NodeId) -> Result<NodeId> {
        let (b, g4) = dims(self.value(gates));
        let (b2, h) = dims(self.value(c_prev));
        if g4 != 4 * h || b != b2 {
            return Err(Error::shape("lstm_cell", format!("gates {b}x{g4}, cell {b2}x{h}")));
        }
        let gv = self.value(gates).data();
        let cv = self.value(c_prev).data();
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let gr = &gv[r * 4 * h..(r + 1) * 4 * h];
            let cr = &cv[r * h..(r + 1) * h];
            let (ho, co) = out[r * 2 * h..(r + 1) * 2 * h].split_at_mut(h);
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let g = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let c = f * cr[j] + i * g;
                co[j] = c;
                ho[j] = o * c.tanh();
            }
        }
        let rg = self.rg(&[gates, c_prev]);
        self.push(
            "lstm_cell",
            Cow::Owned(mat(b, 2 * h, out)),
            Op::LstmCell { gates, c_prev },
            rg,
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(n).for_each(log_softmax_in_place);
        let rg = self.rg(&[x]);
        self.push("log_softmax", Cow::Owned(mat(m, n, out)), Op::LogSoftmax(x), rg)
    }

    /// Batched dot-product attention.
    ///
    /// `query` is `q x d`; `keys` (`S*batch x d`) and `values`
    /// (`S*batch x dv`) are time-major, row `s*batch + i` belonging to batch
    /// element `i`. Query row `r` attends over element `r % batch`.
    pub fn attention(
        &mut self,
        query: NodeId,
        keys: NodeId,
        values: NodeId,
        batch: usize,
    ) -> Result<NodeId> {
        let (q, d) = dims(self.value(query));
        let (kr, kd) = dims(self.value(keys));
        let (vr, dv) = dims(self.value(values));
        if batch == 0 || kd != d || kr != vr || kr % batch != 0 || kr == 0 {
            return Err(Error::shape(
                "attention",
                format!("query {q}x{d}, keys {kr}x{kd}, values {vr}x{dv}, batch {batch}"),
            ));
        }
        let steps = kr / batch;
        let (qv, kv, vv) = (
            self.value(query).data(),
            self.value(keys).data(),
            self.value(values).data(),
        );
        let mut weights = vec![0.0; q * steps];
        let mut out = vec![0.0; q * dv];
        for r in 0..q {
            let e = r % batch;
            let qr = &qv[r * d..(r + 1) * d];
            let w = &mut weights[r * steps..(r + 1) * steps];
            for (s, ws) in w.iter_mut().enumerate() {
                let kr = &kv[(s * batch + e) * d..(s * batch + e + 1) * d];
                *ws = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
            }
            log_softmax_in_place(w);
            w.iter_mut().for_each(|v| *v = v.exp());
            let o = &mut out[r * dv..(r + 1) * dv];
            for (s, &ws) in w.iter().enumerate() {
                let vrow = &vv[(s * batch + e) * dv..(s * batch + e + 1) * dv];
                o.iter_mut().zip(vrow).for_each(|(o, v)| *o += ws * v);
            }
        }
        let rg = self.rg(&[query, keys, values]);
        self.push(
            "attention",
            Cow::Owned(mat(q, dv, out)),
            Op::Attention {
                query,
                keys,
                values,
                batch,
                weights,
            },
            rg,
        )
    }

    /// Label-smoothed cross entropy summed over rows:
    /// `sum_i w_i * -sum_y q_i(y) logp[i, y]` with
    /// `q_i = (1 - eps) onehot(target_i) + eps / V`.
    pub fn smoothed_nll(
        &mut self,
        logp: NodeId,
        targets: &[u32],
        weights: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (m, v) = dims(self.value(logp));
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape(
                "smoothed_nll",
                format!("{m} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1)")));
        }
        let lp = self.value(logp).data();
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            if w == 0.0 {
                continue;
            }
            let row = &lp[i * v..(i + 1) * v];
            let smooth: f64 = if eps > 0.0 {
                row.iter().sum::<f64>() * eps / v as f64
            } else {
                0.0
            };
            total += w * -((1.0 - eps) * row[t as usize] + smooth);
        }
        let rg = self.rg(&[logp]);
        self.push(
            "smoothed_nll",
            Cow::Owned(Tensor::scalar(total)),
            Op::SmoothedNll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                eps,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Cow::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<NodeGrads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "backward",
                });
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(NodeGrads {
            grads,
            params: self.param_nodes.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        // Accumulates `f(i)` into the gradient of `id`.
        macro_rules! acc {
            ($id:expr, |$i:ident| $e:expr) => {{
                let id = $id;
                if needs(id) {
                    let n = self.nodes[id.0].value.len();
                    let dst = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
                    for $i in 0..n {
                        dst[$i] += $e;
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                if needs(*a) {
                    let dst = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, 1.0, dst);
                }
                if needs(*b) {
                    let dst = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, 1.0, dst);
                }
            }
            Op::AddBias(x, b) => {
                acc!(*x, |i| g[i]);
                if needs(*b) {
                    let n = self.value(*b).len();
                    let dst = grads[b.0].get_or_insert_with(|| vec![0.0; n]);
                    for row in g.chunks(n) {
                        dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Add(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |i| g[i] * bv[i]);
                acc!(*b, |i| g[i] * av[i]);
            }
            Op::Scale(a, s) => acc!(*a, |i| g[i] * s),
            Op::Sigmoid(a) => acc!(*a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Tanh(a) => acc!(*a, |i| g[i] * (1.0 - out[i] * out[i])),
            Op::Relu(a) => acc!(*a, |i| if out[i] > 0.0 { g[i] } else { 0.0 }),
            Op::Exp(a) => acc!(*a, |i| g[i] * out[i]),
            Op::Log(a) => {
                let av = self.value(*a).data();
                acc!(*a, |i| g[i] / av[i]);
            }
            Op::Embed { table, ids } => {
                if needs(*table) {
                    let (v, d) = dims(self.value(*table));
                    let dst = grads[table.0].get_or_insert_with(|| vec![0.0; v * d]);
                    for (r, &id) in ids.iter().enumerate() {
                        let row = &mut dst[id as usize * d..(id as usize + 1) * d];
                        row.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceCols { src, start } => {
                if needs(*src) {
                    let (m, n) = dims(self.value(*src));
                    let len = node.value.cols();
                    let dst = grads[src.0].get_or_insert_with(|| vec![0.0; m * n]);
                    for r in 0..m {
                        let d = &mut dst[r * n + start..r * n + start + len];
                        d.iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceRows { src, start } => {
                if needs(*src) {
                    let n = self.value(*src).cols();
                    let total = self.value(*src).len();
                    let dst = grads[src.0].get_or_insert_with(|| vec![0.0; total]);
                    dst[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if needs(p) {
                        let dst = grads[p.0].get_or_insert_with(|| vec![0.0; m * pc]);
                        for r in 0..m {
                            dst[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(&g[r * n + off..r * n + off + pc])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if needs(p) {
                        let dst = grads[p.0].get_or_insert_with(|| vec![0.0; len]);
                        dst.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::LstmCell { gates, c_prev } => {
                let (b, g4) = dims(self.value(*gates));
                let h = g4 / 4;
                let gv = self.value(*gates).data();
                let cv = self.value(*c_prev).data();
                let mut dgates = vec![0.0; b * g4];
                let mut dcp = vec![0.0; b * h];
                for r in 0..b {
                    let gr = &gv[r * g4..(r + 1) * g4];
                    let outr = &out[r * 2 * h..(r + 1) * 2 * h];
                    let gout = &g[r * 2 * h..(r + 1) * 2 * h];
                    for j in 0..h {
                        let i = sigmoid(gr[j]);
                        let f = sigmoid(gr[h + j]);
                        let cand = gr[2 * h + j].tanh();
                        let o = sigmoid(gr[3 * h + j]);
                        let c = outr[h + j];
                        let tc = c.tanh();
                        let dh = gout[j];
                        let dc = gout[h + j] + dh * o * (1.0 - tc * tc);
                        let dg = &mut dgates[r * g4..(r + 1) * g4];
                        dg[j] = dc * cand * i * (1.0 - i);
                        dg[h + j] = dc * cv[r * h + j] * f * (1.0 - f);
                        dg[2 * h + j] = dc * i * (1.0 - cand * cand);
                        dg[3 * h + j] = dh * tc * o * (1.0 - o);
                        dcp[r * h + j] = dc * f;
                    }
                }
                acc!(*gates, |i| dgates[i]);
                acc!(*c_prev, |i| dcp[i]);
            }
            Op::LogSoftmax(x) => {
                if needs(*x) {
                    let n = node.value.cols();
                    let len = node.value.len();
                    let dst = grads[x.0].get_or_insert_with(|| vec![0.0; len]);
                    for ((d, gr), yr) in dst.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            d[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Attention {
                query,
                keys,
                values,
                batch,
                weights,
            } => {
                let (q, d) = dims(self.value(*query));
                let dv = self.value(*values).cols();
                let steps = self.value(*keys).rows() / batch;
                let (qv, kv, vv) = (
                    self.value(*query).data(),
                    self.value(*keys).data(),
                    self.value(*values).data(),
                );
                let mut dq = vec![0.0; q * d];
                let mut dk = vec![0.0; kv.len()];
                let mut dvals = vec![0.0; vv.len()];
                let mut dscore = vec![0.0; steps];
                for r in 0..q {
                    let e = r % batch;
                    let w = &weights[r * steps..(r + 1) * steps];
                    let go = &g[r * dv..(r + 1) * dv];
                    let mut dot_sum = 0.0;
                    for s in 0..steps {
                        let row = (s * batch + e) * dv;
                        let vrow = &vv[row..row + dv];
                        let da: f64 = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dscore[s] = da;
                        dot_sum += w[s] * da;
                        dvals[row..row + dv]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(x, y)| *x += w[s] * y);
                    }
                    let qr = &qv[r * d..(r + 1) * d];
                    for s in 0..steps {
                        let ds = w[s] * (dscore[s] - dot_sum);
                        let row = (s * batch + e) * d;
                        for j in 0..d {
                            dq[r * d + j] += ds * kv[row + j];
                            dk[row + j] += ds * qr[j];
                        }
                    }
                }
                acc!(*query, |i| dq[i]);
                acc!(*keys, |i| dk[i]);
                acc!(*values, |i| dvals[i]);
            }
            Op::SmoothedNll {
                logp,
                targets,
                weights,
                eps,
            } => {
                if needs(*logp) {
                    let v = self.value(*logp).cols();
                    let len = self.value(*logp).len();
                    let dst = grads[logp.0].get_or_insert_with(|| vec![0.0; len]);
                    let g0 = g[0];
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut dst[i * v..(i + 1) * v];
                        let u = -g0 * w * eps / v as f64;
                        row.iter_mut().for_each(|x| *x += u);
                        row[t as usize] += -g0 * w * (1.0 - eps);
                    }
                }
            }
            Op::Sum(x) => acc!(*x, |_i| g[0]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_two_x() {
        let mut g = Graph::detached();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_or_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0)).unwrap();
        let q = store.add("q", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::new(&store, true);
        let pn = g.param(p);
        let _qn = g.param(q);
        let l = g.mul(pn, pn).unwrap();
        let grads = g.backward(l).unwrap().into_param_grads();
        assert_eq!(grads.get(p).unwrap(), &[2.0]);
        assert!(grads.get(q).map_or(true, |v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::detached();
        let x = g.variable(Tensor::scalar(2.0)).unwrap();
        let a = g.scale(x, 3.0).unwrap();
        let b = g.scale(x, 4.0).unwrap();
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::detached();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut g = Graph::detached();
        let x = g.variable(Tensor::scalar(-1.0)).unwrap();
        match g.log(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new(&store, false);
        let pn = g.param(p);
        let y = g.scale(pn, 2.0).unwrap();
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn attention_rows_pick_their_batch_element() {
        let mut g = Graph::detached();
        // two batch elements, two steps; memory is time-major
        let mem = Tensor::matrix(4, 1, vec![1.0, 10.0, 2.0, 20.0]).unwrap();
        let keys = g.input(Tensor::matrix(4, 1, vec![0.0; 4]).unwrap()).unwrap();
        let vals = g.input(mem).unwrap();
        let q = g.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let ctx = g.attention(q, keys, vals, 2).unwrap();
        assert_eq!(g.value(ctx).data(), &[1.5, 15.0]);
        assert_eq!(g.attention_weights(ctx).unwrap(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
