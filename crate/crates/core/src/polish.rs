//! Multi-hop highlight polishing: a GRU whose update gate is replaced by a
//! position-normalised selection score computed from the previous hop and the
//! content latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::encoders::EncoderStates;
use crate::layers::Linear;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How per-position selection scores become update gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    /// Softmax over the valid positions of each row.
    #[default]
    Softmax,
    /// Independent sigmoid per position.
    Sigmoid,
}

impl std::str::FromStr for GateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(format!("unknown gate kind {other:?} (softmax|sigmoid)")),
        }
    }
}

/// GRU reset gate and candidate; the update gate comes from outside.
#[derive(Clone, Debug)]
pub struct SruCell {
    /// Input projections for the reset gate and candidate, `[D x 2D]`.
    pub input: Linear,
    pub reset_hidden: ParamId,
    pub cand_hidden: ParamId,
    pub dim: usize,
}

impl SruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, "polish.sru_input", Group::Generator, dim, 2 * dim, std, rng),
            reset_hidden: store.add("polish.sru_reset_hidden", Group::Generator, Tensor::randn(dim, dim, std, rng)),
            cand_hidden: store.add("polish.sru_cand_hidden", Group::Generator, Tensor::randn(dim, dim, std, rng)),
            dim,
        }
    }

    /// `h_t = g_t * cand + (1 - g_t) * h_prev`, with `gate: [B x 1]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h_prev: NodeId, gate: NodeId) -> NodeId {
        let proj = self.input.forward(g, store, x);
        let xr = g.slice_cols(proj, 0, self.dim);
        let xh = g.slice_cols(proj, self.dim, self.dim);
        let wr = g.param(store, self.reset_hidden);
        let wh = g.param(store, self.cand_hidden);
        let hr = g.matmul(h_prev, wr);
        let pre_r = g.add(xr, hr);
        let r = g.sigmoid(pre_r);
        let hh = g.matmul(h_prev, wh);
        let gated = g.mul(r, hh);
        let pre_c = g.add(xh, gated);
        let cand = g.tanh(pre_c);
        g.lerp(gate, cand, h_prev)
    }
}

/// Per-hop states and gates; `hops[0]` is the encoder output.
#[derive(Clone, Debug)]
pub struct PolishState {
    pub hops: Vec<NodeId>,
    /// `[B x T]` gates of each hop (`gates[k]` produced `hops[k + 1]`).
    pub gates: Vec<NodeId>,
}

impl PolishState {
    pub fn output(&self) -> NodeId {
        *self.hops.last().expect("at least the encoder states")
    }
}

#[derive(Clone, Debug)]
pub struct Polisher {
    pub content_proj: Option<Linear>,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub cell: SruCell,
    pub dim: usize,
    pub kind: GateKind,
}

impl Polisher {
    /// `dim` is the encoder state width (2H); `latent` the content width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        latent: usize,
        gate_hidden: usize,
        kind: GateKind,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let content_proj =
            (latent != dim).then(|| Linear::new(store, "polish.content_proj", Group::Generator, latent, dim, std, rng));
        Self {
            content_proj,
            gate_hidden: Linear::new(store, "polish.gate_hidden", Group::Generator, 3 * dim, gate_hidden, std, rng),
            gate_out: Linear::new(store, "polish.gate_out", Group::Generator, gate_hidden, 1, std, rng),
            cell: SruCell::new(store, dim, std, rng),
            dim,
            kind,
        }
    }

    /// Content latent mapped to the state width.
    pub fn project_content(&self, g: &mut Graph, store: &ParamStore, content: NodeId) -> NodeId {
        match &self.content_proj {
            Some(p) => p.forward(g, store, content),
            None => content,
        }
    }

    /// Raw selection scores `z: [B x T]` from `e_t = [h_t * c; h_t; c]`.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, prev: NodeId, content: NodeId, len: usize) -> NodeId {
        let rows = g.value(content).rows();
        let rep = g.repeat_rows(content, len);
        let prod = g.mul(prev, rep);
        let e = g.concat(&[prod, prev, rep]);
        let hidden = self.gate_hidden.forward(g, store, e);
        let hidden = g.tanh(hidden);
        let z = self.gate_out.forward(g, store, hidden);
        g.reshape(z, rows, len)
    }

    /// Update gates for one hop; padding positions get exactly zero.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, prev: NodeId, content: NodeId, mask: &[bool], len: usize) -> NodeId {
        let z = self.scores(g, store, prev, content, len);
        self.normalize(g, z, mask)
    }

    pub fn normalize(&self, g: &mut Graph, z: NodeId, mask: &[bool]) -> NodeId {
        match self.kind {
            GateKind::Softmax => g.softmax(z, Some(mask)),
            GateKind::Sigmoid => {
                let s = g.sigmoid(z);
                let (r, c) = g.value(z).shape();
                let m = g.constant(Tensor::from_vec(r, c, mask.iter().map(|&v| f64::from(u8::from(v))).collect()));
                g.mul(s, m)
            }
        }
    }

    /// One hop of the SRU recurrence with precomputed gates `[B x T]`,
    /// zero initial state and `x_t` = previous-hop state.
    pub fn run_hop(&self, g: &mut Graph, store: &ParamStore, prev: NodeId, gates: NodeId, len: usize) -> NodeId {
        let rows = g.value(gates).rows();
        let mut h = g.constant(Tensor::zeros(rows, self.dim));
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            let x = g.seq_step(prev, t, len);
            let gt = g.slice_cols(gates, t, 1);
            h = self.cell.step(g, store, x, h, gt);
            out.push(h);
        }
        g.stack_seq(&out)
    }

    /// Runs `hops` polishing passes over the document states.
    pub fn polish(&self, g: &mut Graph, store: &ParamStore, doc: &EncoderStates, content: NodeId, hops: usize) -> PolishState {
        assert!(hops >= 1, "hop count must be at least 1");
        let c = self.project_content(g, store, content);
        let mut state = PolishState { hops: vec![doc.states], gates: Vec::with_capacity(hops) };
        for _ in 0..hops {
            let prev = state.output();
            let gates = self.gate(g, store, prev, c, &doc.mask, doc.len);
            let next = self.run_hop(g, store, prev, gates, doc.len);
            state.gates.push(gates);
            state.hops.push(next);
        }
        state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn polisher(kind: GateKind) -> (ParamStore, Polisher) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = Polisher::new(&mut store, 4, 3, 5, kind, 0.5, &mut rng);
        (store, p)
    }

    #[test]
    fn equal_scores_give_uniform_gates() {
        let (_, p) = polisher(GateKind::Softmax);
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(2, 4, 0.7));
        let gates = p.normalize(&mut g, z, &[true, true, true, true, true, true, false, false]);
        assert_eq!(g.value(gates).row(0), &[0.25; 4]);
        assert_eq!(g.value(gates).row(1), &[0.5, 0.5, 0.0, 0.0]);
        let mut big = Tensor::zeros(1, 3);
        big.set(0, 1, 1e3);
        let z = g.constant(big);
        let gates = p.normalize(&mut g, z, &[true; 3]);
        assert!((g.value(gates).get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sru_gate_extremes() {
        let (store, p) = polisher(GateKind::Softmax);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(2, 4, 1.0, &mut rng));
        let h = g.constant(Tensor::randn(2, 4, 1.0, &mut rng));
        let zero = g.constant(Tensor::zeros(2, 1));
        let one = g.constant(Tensor::full(2, 1, 1.0));
        let kept = p.cell.step(&mut g, &store, x, h, zero);
        assert_eq!(g.value(kept), g.value(h));
        let updated = p.cell.step(&mut g, &store, x, h, one);
        // full update equals the candidate, which lies strictly inside (-1, 1)
        assert!(g.value(updated).data().iter().all(|v| v.abs() < 1.0));
        assert_ne!(g.value(updated), g.value(h));
    }

    #[test]
    fn zero_gates_freeze_hop_at_zero() {
        let (store, p) = polisher(GateKind::Softmax);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let seq = g.constant(Tensor::randn(6, 4, 1.0, &mut rng));
        let gates = g.constant(Tensor::zeros(2, 3));
        let out = p.run_hop(&mut g, &store, seq, gates, 3);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_variant_masks_padding() {
        let (_, p) = polisher(GateKind::Sigmoid);
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(1, 3, 0.0));
        let gates = p.normalize(&mut g, z, &[true, true, false]);
        assert_eq!(g.value(gates).data(), &[0.5, 0.5, 0.0]);
        assert_eq!("sigmoid".parse::<GateKind>().unwrap(), GateKind::Sigmoid);
        assert!("tanh".parse::<GateKind>().is_err());
    }
}
