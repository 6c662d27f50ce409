//! Affine and LSTM building blocks shared by every module.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [input x output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::randn(input, output, std, rng));
        let bias = store.add(format!("{name}.bias"), group, Tensor::randn(1, output, std, rng));
        Self { weight, bias, input, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Single LSTM cell with fused gate weights in the order input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub gates: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self { gates: Linear::new(store, name, group, input + hidden, 4 * hidden, std, rng), hidden }
    }

    /// One step; returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let xh = g.concat(&[x, h]);
        let z = self.gates.forward(g, store, xh);
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n);
        let f = g.slice_cols(z, n, n);
        let cand = g.slice_cols(z, 2 * n, n);
        let o = g.slice_cols(z, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_new = g.add(keep, write);
        let squashed = g.tanh(c_new);
        let h_new = g.mul(o, squashed);
        (h_new, c_new)
    }
}
