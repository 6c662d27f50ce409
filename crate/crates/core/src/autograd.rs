//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every parameter leaf that was
//! loaded into the graph.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log { x: NodeId, floor: f64 },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Pick { x: NodeId, idx: Vec<usize> },
    Sum(NodeId),
    WeightedSum { x: NodeId, weights: Vec<f64> },
    Lerp { gate: NodeId, a: NodeId, b: NodeId },
    MulCol { x: NodeId, col: NodeId },
    SeqScores { seq: NodeId, q: NodeId, len: usize },
    SeqContext { w: NodeId, seq: NodeId, len: usize },
    StackSeq(Vec<NodeId>),
    SeqStep { seq: NodeId, t: usize, len: usize },
    RepeatRows { x: NodeId, times: usize },
    Reshape(NodeId),
    ScatterCols { x: NodeId, idx: Vec<usize> },
    PadCols(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Parameter values are copied in on first use, so the
/// store may be mutated while a graph is alive; later loads see new values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Constant, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param(id), needs_grad: true });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols());
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push(v, Op::AddBias(a, bias), &[a, bias])
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise op on mismatched shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Natural log with inputs clamped from below at `floor`; clamped entries
    /// receive zero gradient.
    pub fn log(&mut self, a: NodeId, floor: f64) -> NodeId {
        // NaN must survive the floor so non-finite losses stay detectable
        let v = self.value(a).map(|x| if x < floor { floor.ln() } else { x.ln() });
        self.push(v, Op::Log { x: a, floor }, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat on mismatched row counts");
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols());
        let mut v = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(v, Op::Slice { x: a, start }, &[a])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let mut v = Tensor::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(tv.row(id));
        }
        self.push(v, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Row-wise softmax. With a mask, invalid entries get probability 0 and a
    /// row without valid entries is all zeros.
    pub fn softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> NodeId {
        let av = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), av.len());
        }
        let mut v = Tensor::zeros(av.rows(), av.cols());
        let cols = av.cols();
        for r in 0..av.rows() {
            let valid = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols).filter(|&c| valid(c)).map(|c| av.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in 0..cols {
                if valid(c) {
                    let e = (av.get(r, c) - max).exp();
                    v.set(r, c, e);
                    total += e;
                }
            }
            for x in v.row_mut(r) {
                *x /= total;
            }
        }
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = av.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    /// Selects `a[i, idx[i]]` into an `n x 1` column.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len());
        let v = Tensor::column(idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect());
        self.push(v, Op::Pick { x: a, idx: idx.to_vec() }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// `sum_i w_i * a_i` over the flattened tensor.
    pub fn weighted_sum(&mut self, a: NodeId, weights: &[f64]) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.len(), weights.len());
        let v = Tensor::scalar(av.data().iter().zip(weights).map(|(x, w)| x * w).sum());
        self.push(v, Op::WeightedSum { x: a, weights: weights.to_vec() }, &[a])
    }

    /// `gate * a + (1 - gate) * b`; `gate` is either a column broadcast over
    /// columns or has the same shape as `a`.
    pub fn lerp(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let (gv, av, bv) = (self.value(gate), self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(gv.rows(), av.rows());
        assert!(gv.cols() == 1 || gv.cols() == av.cols());
        let mut v = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            for c in 0..av.cols() {
                let g = if gv.cols() == 1 { gv.get(r, 0) } else { gv.get(r, c) };
                v.set(r, c, g * av.get(r, c) + (1.0 - g) * bv.get(r, c));
            }
        }
        self.push(v, Op::Lerp { gate, a, b }, &[gate, a, b])
    }

    /// Multiplies each row of `x` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.shape(), (xv.rows(), 1));
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let k = cv.get(r, 0);
            for x in v.row_mut(r) {
                *x *= k;
            }
        }
        self.push(v, Op::MulCol { x, col }, &[x, col])
    }

    /// For a sequence stored as `[(B*len) x D]` (row `b*len + t`) and queries
    /// `[B x D]`, returns `[B x len]` dot products.
    pub fn seq_scores(&mut self, seq: NodeId, q: NodeId, len: usize) -> NodeId {
        let (sv, qv) = (self.value(seq), self.value(q));
        let b = qv.rows();
        assert_eq!(sv.rows(), b * len);
        assert_eq!(sv.cols(), qv.cols());
        let mut v = Tensor::zeros(b, len);
        for i in 0..b {
            for t in 0..len {
                v.set(i, t, dot(sv.row(i * len + t), qv.row(i)));
            }
        }
        self.push(v, Op::SeqScores { seq, q, len }, &[seq, q])
    }

    /// Weighted sum over time: `out[b] = sum_t w[b, t] * seq[b*len + t]`.
    pub fn seq_context(&mut self, w: NodeId, seq: NodeId, len: usize) -> NodeId {
        let (wv, sv) = (self.value(w), self.value(seq));
        let b = wv.rows();
        assert_eq!(wv.cols(), len);
        assert_eq!(sv.rows(), b * len);
        let mut v = Tensor::zeros(b, sv.cols());
        for i in 0..b {
            for t in 0..len {
                let k = wv.get(i, t);
                if k == 0.0 {
                    continue;
                }
                for (o, s) in v.row_mut(i).iter_mut().zip(sv.row(i * len + t)) {
                    *o += k * s;
                }
            }
        }
        self.push(v, Op::SeqContext { w, seq, len }, &[w, seq])
    }

    /// Interleaves per-step `[B x D]` tensors into `[(B*len) x D]`.
    pub fn stack_seq(&mut self, steps: &[NodeId]) -> NodeId {
        let len = steps.len();
        let (b, d) = self.value(steps[0]).shape();
        let mut v = Tensor::zeros(b * len, d);
        for (t, s) in steps.iter().enumerate() {
            let sv = self.value(*s);
            assert_eq!(sv.shape(), (b, d));
            for i in 0..b {
                v.row_mut(i * len + t).copy_from_slice(sv.row(i));
            }
        }
        self.push(v, Op::StackSeq(steps.to_vec()), steps)
    }

    /// Time step `t` of an interleaved sequence, as `[B x D]`.
    pub fn seq_step(&mut self, seq: NodeId, t: usize, len: usize) -> NodeId {
        let sv = self.value(seq);
        let b = sv.rows() / len;
        let mut v = Tensor::zeros(b, sv.cols());
        for i in 0..b {
            v.row_mut(i).copy_from_slice(sv.row(i * len + t));
        }
        self.push(v, Op::SeqStep { seq, t, len }, &[seq])
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows() * times, xv.cols());
        for i in 0..xv.rows() {
            for t in 0..times {
                v.row_mut(i * times + t).copy_from_slice(xv.row(i));
            }
        }
        self.push(v, Op::RepeatRows { x, times }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = Tensor::from_vec(rows, cols, self.value(x).data().to_vec());
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Scatter-adds `x[r, c]` into column `idx[r * x.cols + c]` of a
    /// `rows x width` output.
    pub fn scatter_cols(&mut self, x: NodeId, idx: &[usize], width: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.len());
        let mut v = Tensor::zeros(xv.rows(), width);
        for r in 0..xv.rows() {
            for c in 0..xv.cols() {
                let j = idx[r * xv.cols() + c];
                let cur = v.get(r, j);
                v.set(r, j, cur + xv.get(r, c));
            }
        }
        self.push(v, Op::ScatterCols { x, idx: idx.to_vec() }, &[x])
    }

    /// Right-pads with zero columns up to `width`.
    pub fn pad_cols(&mut self, x: NodeId, width: usize) -> NodeId {
        let xv = self.value(x);
        assert!(width >= xv.cols());
        let mut v = Tensor::zeros(xv.rows(), width);
        for r in 0..xv.rows() {
            v.row_mut(r)[..xv.cols()].copy_from_slice(xv.row(r));
        }
        self.push(v, Op::PadCols(x), &[x])
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Param(pid) = node.op {
                out.grads.insert(pid, g);
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(false, g, true, bv, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(true, av, false, g, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::AddBias(a, bias) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, zip(g, bv, |x, y| x * y));
                acc(*b, zip(g, av, |x, y| x * y));
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, zip(g, &node.value, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, zip(g, &node.value, |x, t| x * (1.0 - t * t))),
            Op::Exp(a) => acc(*a, zip(g, &node.value, |x, e| x * e)),
            Op::Log { x, floor } => {
                let xv = val(*x);
                acc(*x, zip(g, xv, |gi, xi| if xi > *floor { gi / xi } else { 0.0 }));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(*p, gp);
                }
            }
            Op::Slice { x, start } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, gx);
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (x, y) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                acc(*table, gt);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let mut gx = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let inner = dot(g.row(r), p.row(r));
                    for c in 0..p.cols() {
                        gx.set(r, c, p.get(r, c) * (g.get(r, c) - inner));
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let lp = &node.value;
                let mut gx = Tensor::zeros(lp.rows(), lp.cols());
                for r in 0..lp.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..lp.cols() {
                        gx.set(r, c, g.get(r, c) - lp.get(r, c).exp() * total);
                    }
                }
                acc(*x, gx);
            }
            Op::Pick { x, idx } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &c) in idx.iter().enumerate() {
                    gx.set(r, c, g.get(r, 0));
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.rows(), xv.cols(), g.item()));
            }
            Op::WeightedSum { x, weights } => {
                let xv = val(*x);
                let k = g.item();
                acc(*x, Tensor::from_vec(xv.rows(), xv.cols(), weights.iter().map(|w| w * k).collect()));
            }
            Op::Lerp { gate, a, b } => {
                let (gv, av, bv) = (val(*gate), val(*a), val(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(av.rows(), av.cols());
                let mut gg = Tensor::zeros(gv.rows(), gv.cols());
                for r in 0..av.rows() {
                    for c in 0..av.cols() {
                        let (gc, k) = if gv.cols() == 1 { (0, gv.get(r, 0)) } else { (c, gv.get(r, c)) };
                        let up = g.get(r, c);
                        ga.set(r, c, up * k);
                        gb.set(r, c, up * (1.0 - k));
                        let cur = gg.get(r, gc);
                        gg.set(r, gc, cur + up * (av.get(r, c) - bv.get(r, c)));
                    }
                }
                acc(*gate, gg);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MulCol { x, col } => {
                let (xv, cv) = (val(*x), val(*col));
                let mut gx = g.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for r in 0..xv.rows() {
                    let k = cv.get(r, 0);
                    gc.set(r, 0, dot(g.row(r), xv.row(r)));
                    for v in gx.row_mut(r) {
                        *v *= k;
                    }
                }
                acc(*x, gx);
                acc(*col, gc);
            }
            Op::SeqScores { seq, q, len } => {
                let (sv, qv) = (val(*seq), val(*q));
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                let mut gq = Tensor::zeros(qv.rows(), qv.cols());
                for i in 0..qv.rows() {
                    for t in 0..*len {
                        let k = g.get(i, t);
                        if k == 0.0 {
                            continue;
                        }
                        let row = i * len + t;
                        for c in 0..sv.cols() {
                            gs.data_mut()[row * sv.cols() + c] += k * qv.get(i, c);
                            gq.data_mut()[i * qv.cols() + c] += k * sv.get(row, c);
                        }
                    }
                }
                acc(*seq, gs);
                acc(*q, gq);
            }
            Op::SeqContext { w, seq, len } => {
                let (wv, sv) = (val(*w), val(*seq));
                let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                for i in 0..wv.rows() {
                    for t in 0..*len {
                        let row = i * len + t;
                        gw.set(i, t, dot(g.row(i), sv.row(row)));
                        let k = wv.get(i, t);
                        for (o, x) in gs.row_mut(row).iter_mut().zip(g.row(i)) {
                            *o += k * x;
                        }
                    }
                }
                acc(*w, gw);
                acc(*seq, gs);
            }
            Op::StackSeq(steps) => {
                let len = steps.len();
                let b = g.rows() / len;
                for (t, s) in steps.iter().enumerate() {
                    let mut gs = Tensor::zeros(b, g.cols());
                    for i in 0..b {
                        gs.row_mut(i).copy_from_slice(g.row(i * len + t));
                    }
                    acc(*s, gs);
                }
            }
            Op::SeqStep { seq, t, len } => {
                let sv = val(*seq);
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                for i in 0..g.rows() {
                    gs.row_mut(i * len + t).copy_from_slice(g.row(i));
                }
                acc(*seq, gs);
            }
            Op::RepeatRows { x, times } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    for t in 0..*times {
                        for (o, y) in gx.row_mut(i).iter_mut().zip(g.row(i * times + t)) {
                            *o += y;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => {
                let xv = val(*x);
                acc(*x, Tensor::from_vec(xv.rows(), xv.cols(), g.data().to_vec()));
            }
            Op::ScatterCols { x, idx } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for c in 0..xv.cols() {
                        gx.set(r, c, g.get(r, idx[r * xv.cols() + c]));
                    }
                }
                acc(*x, gx);
            }
            Op::PadCols(x) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.row_mut(r).copy_from_slice(&g.row(r)[..xv.cols()]);
                }
                acc(*x, gx);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(param) for a graph builder.
    fn check(build: impl Fn(&mut Graph, &ParamStore, ParamId) -> NodeId, rows: usize, cols: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = store.add("p", Group::Generator, Tensor::randn(rows, cols, 0.7, &mut rng));
        let mut g = Graph::new();
        let loss = build(&mut g, &store, p);
        let analytic = g.backward(loss).get(p).cloned().unwrap();
        let h = 1e-6;
        for i in 0..rows * cols {
            let orig = store.value(p).data()[i];
            store.value_mut(p).data_mut()[i] = orig + h;
            let mut g1 = Graph::new();
            let l1 = build(&mut g1, &store, p);
            let up = g1.value(l1).item();
            store.value_mut(p).data_mut()[i] = orig - h;
            let mut g2 = Graph::new();
            let l2 = build(&mut g2, &store, p);
            let down = g2.value(l2).item();
            store.value_mut(p).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-6 + 1e-5 * a.abs().max(numeric.abs()), "entry {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        check(
            |g, s, p| {
                let x = g.param(s, p);
                let a = g.sigmoid(x);
                let b = g.tanh(x);
                let c = g.mul(a, b);
                let d = g.exp(c);
                let e = g.sub(d, a);
                let f = g.log(d, 1e-12);
                let h = g.add(e, f);
                let k = g.scale(h, 0.3);
                g.sum(k)
            },
            3,
            4,
        );
    }

    #[test]
    fn matmul_bias_concat_slice_gradcheck() {
        check(
            |g, s, p| {
                let x = g.param(s, p);
                let w = g.constant(Tensor::from_vec(4, 2, vec![0.1, -0.2, 0.3, 0.5, -0.7, 0.2, 0.4, 0.9]));
                let y = g.matmul(x, w);
                let b = g.slice_cols(x, 1, 2);
                let bias = g.slice_cols(x, 0, 2);
                let row = g.constant(Tensor::from_vec(1, 2, vec![0.5, -1.0]));
                let yb = g.add_bias(y, row);
                let z = g.concat(&[yb, b, bias]);
                let t = g.tanh(z);
                g.weighted_sum(t, &(0..18).map(|i| (i as f64) * 0.1 - 0.5).collect::<Vec<_>>())
            },
            3,
            4,
        );
    }

    #[test]
    fn softmax_family_gradcheck() {
        check(
            |g, s, p| {
                let x = g.param(s, p);
                let mask = [true, true, false, true, true, true, true, false, false, true, true, true];
                let sm = g.softmax(x, Some(&mask));
                let ls = g.log_softmax(x);
                let pk = g.pick(ls, &[0, 3, 2]);
                let w = g.weighted_sum(sm, &(0..12).map(|i| (i as f64).sin()).collect::<Vec<_>>());
                let s2 = g.sum(pk);
                g.add(w, s2)
            },
            3,
            4,
        );
    }

    #[test]
    fn sequence_ops_gradcheck() {
        // B=2, len=3, D=2: the parameter is the interleaved sequence.
        check(
            |g, s, p| {
                let seq = g.param(s, p);
                let q = g.slice_cols(seq, 0, 2);
                let q = g.seq_step(q, 1, 3);
                let sc = g.seq_scores(seq, q, 3);
                let w = g.softmax(sc, None);
                let ctx = g.seq_context(w, seq, 3);
                let rep = g.repeat_rows(ctx, 3);
                let m = g.mul(rep, seq);
                let steps: Vec<_> = (0..3).map(|t| g.seq_step(m, t, 3)).collect();
                let st = g.stack_seq(&steps);
                let r = g.reshape(st, 3, 4);
                let col = g.slice_cols(r, 0, 1);
                let mc = g.mul_col(r, col);
                let gate = g.sigmoid(col);
                let other = g.tanh(r);
                let l = g.lerp(gate, mc, other);
                let sc2 = g.scatter_cols(l, &[0, 1, 1, 4, 2, 2, 0, 3, 4, 4, 1, 0], 6);
                let padded = g.pad_cols(w, 5);
                let a = g.weighted_sum(sc2, &(0..18).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>());
                let b = g.weighted_sum(padded, &(0..10).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
                g.add(a, b)
            },
            6,
            2,
        );
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut store = ParamStore::new();
        let p = store.add("emb", Group::Generator, Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let mut g = Graph::new();
        let t = g.param(&store, p);
        let rows = g.gather(t, &[2, 2, 0]);
        assert_eq!(g.value(rows).data(), &[5., 6., 5., 6., 1., 2.]);
        let l = g.sum(rows);
        let grad = g.backward(l);
        assert_eq!(grad.get(p).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn masked_softmax_zeroes_invalid_and_empty_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(2, 3, vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]));
        let s = g.softmax(x, Some(&[true, false, true, false, false, false]));
        let v = g.value(s);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
    }
}
