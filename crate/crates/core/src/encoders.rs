//! Shared embedding table and the bidirectional LSTM encoders for documents
//! and headlines.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::corpus::PaddedIds;
use crate::error::{Error, Result};
use crate::layers::LstmCell;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = store.add("embedding", Group::Generator, Tensor::randn(vocab, dim, std, rng));
        Self { table, vocab, dim }
    }

    /// Row lookup. Extended (OOV) ids must be mapped to UNK by the caller.
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::IdOutOfRange { id, size: self.vocab });
        }
        let t = g.param(store, self.table);
        Ok(g.gather(t, ids))
    }
}

/// Encoder output for a batch of `rows` sequences of length `len`.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[(rows*len) x 2H]`, row `b*len + t` = [forward_t; backward_t].
    pub states: NodeId,
    /// `[rows x 2H]` = [forward at the last valid step; backward at step 0].
    pub pooled: NodeId,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub len: usize,
}

/// Column `[rows x 1]` of 0/1 marking which rows are still inside their
/// sequence at step `t`.
fn step_mask(lengths: &[usize], t: usize) -> Tensor {
    Tensor::column(lengths.iter().map(|&n| if t < n { 1.0 } else { 0.0 }).collect())
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), Group::Generator, input, hidden, std, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), Group::Generator, input, hidden, std, rng),
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a padded batch. Padding positions carry the last state forward
    /// (and zeros backward), so valid positions match an unpadded run.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, emb: &Embedding, input: &PaddedIds) -> Result<EncoderStates> {
        if let Some(r) = input.lengths.iter().position(|&n| n == 0) {
            return Err(Error::EmptySequence(r));
        }
        let input = input.trimmed();
        let (rows, len) = (input.rows, input.cols);
        let column = |t: usize| (0..rows).map(|r| input.ids[r * len + t]).collect::<Vec<_>>();
        let mut xs = Vec::with_capacity(len);
        for t in 0..len {
            xs.push(emb.lookup(g, store, &column(t))?);
        }
        let masks: Vec<NodeId> = (0..len).map(|t| g.constant(step_mask(&input.lengths, t))).collect();
        let run = |g: &mut Graph, cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| {
            let zero = g.constant(Tensor::zeros(rows, self.hidden));
            let (mut h, mut c) = (zero, zero);
            let mut out = vec![zero; len];
            for t in order {
                let (hn, cn) = cell.step(g, store, xs[t], h, c);
                h = g.lerp(masks[t], hn, h);
                c = g.lerp(masks[t], cn, c);
                out[t] = h;
            }
            out
        };
        let fwd = run(g, &self.forward, &mut (0..len));
        let bwd = run(g, &self.backward, &mut (0..len).rev());
        let steps: Vec<NodeId> = (0..len).map(|t| g.concat(&[fwd[t], bwd[t]])).collect();
        let states = g.stack_seq(&steps);
        let pooled = g.concat(&[fwd[len - 1], bwd[0]]);
        Ok(EncoderStates { states, pooled, mask: input.mask(), rows, len })
    }
}
