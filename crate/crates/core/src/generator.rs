//! LSTM headline decoder with dual attention over original and polished
//! document states, an editing gate between the two contexts, a guidance
//! gate that mixes in the style latent, and pointer-style copying.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::corpus::{PAD, START, STOP, UNK};
use crate::encoders::Embedding;
use crate::error::Result;
use crate::layers::{Linear, LstmCell};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Probability floor applied before taking logs of target probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct GeneratorDims {
    pub emb: usize,
    /// Width of encoder / polished states (2H).
    pub source: usize,
    pub hidden: usize,
    pub output: usize,
    pub latent: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub bridge: Linear,
    pub cell: LstmCell,
    pub attn_doc: ParamId,
    pub attn_polished: ParamId,
    pub edit_gate: Linear,
    pub output: Linear,
    pub guide_gate: Linear,
    pub style_proj: Linear,
    pub vocab_out: Linear,
    pub copy_gate: Linear,
    pub dims: GeneratorDims,
}

/// Recurrent state carried between decoding steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
    /// Mixed attention context `h^E` of the previous step.
    pub context: NodeId,
}

/// Encoded source visible to the decoder.
#[derive(Clone, Debug)]
pub struct Source {
    /// `[(B*len) x 2H]` original document states.
    pub doc: NodeId,
    /// `[(B*len) x 2H]` polished states.
    pub polished: NodeId,
    pub mask: Vec<bool>,
    pub len: usize,
    /// Extended-vocabulary id at each source position, `B*len` entries.
    pub extended_ids: Vec<usize>,
    /// `|V| + max OOVs`.
    pub width: usize,
    /// Style latent `[B x Z]`.
    pub style: NodeId,
}

/// Forced gate values, for probing the gate algebra.
#[derive(Clone, Copy, Debug, Default)]
pub struct GateOverrides {
    pub edit: Option<f64>,
    pub guide: Option<f64>,
    pub copy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DecoderStep {
    pub state: DecoderState,
    pub attn_doc: NodeId,
    pub attn_polished: NodeId,
    pub ctx_doc: NodeId,
    pub ctx_polished: NodeId,
    pub edit_gate: NodeId,
    pub out: NodeId,
    pub guide_gate: NodeId,
    pub guided: NodeId,
    pub p_vocab: NodeId,
    pub p_gen: NodeId,
    pub p_final: NodeId,
}

fn gate_value(g: &mut Graph, forced: Option<f64>, rows: usize, f: impl FnOnce(&mut Graph) -> NodeId) -> NodeId {
    match forced {
        Some(v) => g.constant(Tensor::full(rows, 1, v)),
        None => f(g),
    }
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: GeneratorDims, std: f64, rng: &mut R) -> Self {
        let gen = Group::Generator;
        let GeneratorDims { emb, source, hidden, output, latent, vocab } = dims;
        Self {
            bridge: Linear::new(store, "dec.bridge", gen, source, 2 * hidden, std, rng),
            cell: LstmCell::new(store, "dec.lstm", gen, emb + source, hidden, std, rng),
            attn_doc: store.add("dec.attn_doc", gen, Tensor::randn(hidden, source, std, rng)),
            attn_polished: store.add("dec.attn_polished", gen, Tensor::randn(hidden, source, std, rng)),
            edit_gate: Linear::new(store, "dec.edit_gate", gen, hidden, 1, std, rng),
            output: Linear::new(store, "dec.output", gen, hidden + source, output, std, rng),
            guide_gate: Linear::new(store, "dec.guide_gate", gen, hidden, 1, std, rng),
            style_proj: Linear::new(store, "dec.style_proj", gen, latent, output, std, rng),
            vocab_out: Linear::new(store, "dec.vocab", gen, output, vocab, std, rng),
            copy_gate: Linear::new(store, "dec.copy_gate", gen, source + hidden + emb, 1, std, rng),
            dims,
        }
    }

    /// `d_0` from an affine bridge of the pooled document state; zero context.
    pub fn init(&self, g: &mut Graph, store: &ParamStore, pooled: NodeId) -> DecoderState {
        let hd = self.dims.hidden;
        let rows = g.value(pooled).rows();
        let both = self.bridge.forward(g, store, pooled);
        let h = g.slice_cols(both, 0, hd);
        let c = g.slice_cols(both, hd, hd);
        let context = g.constant(Tensor::zeros(rows, self.dims.source));
        DecoderState { h, c, context }
    }

    /// Bilinear attention `h_i^T W d_t`, normalised over valid positions.
    fn attend(&self, g: &mut Graph, store: &ParamStore, w: ParamId, states: NodeId, d: NodeId, src: &Source) -> (NodeId, NodeId) {
        let w = g.param(store, w);
        let q = g.matmul(d, w);
        let scores = g.seq_scores(states, q, src.len);
        let attn = g.softmax(scores, Some(&src.mask));
        let ctx = g.seq_context(attn, states, src.len);
        (attn, ctx)
    }

    /// One decoding step. `prev_tokens` may hold extended ids; they are fed
    /// back as UNK.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedding,
        prev: &DecoderState,
        prev_tokens: &[usize],
        src: &Source,
        forced: GateOverrides,
    ) -> Result<DecoderStep> {
        let rows = prev_tokens.len();
        let ids: Vec<usize> = prev_tokens.iter().map(|&t| if t >= self.dims.vocab { UNK } else { t }).collect();
        let e = emb.lookup(g, store, &ids)?;
        let x = g.concat(&[e, prev.context]);
        let (h, c) = self.cell.step(g, store, x, prev.h, prev.c);

        let (attn_doc, ctx_doc) = self.attend(g, store, self.attn_doc, src.doc, h, src);
        let (attn_polished, ctx_polished) = self.attend(g, store, self.attn_polished, src.polished, h, src);
        let edit_gate = gate_value(g, forced.edit, rows, |g| {
            let z = self.edit_gate.forward(g, store, h);
            g.sigmoid(z)
        });
        let context = g.lerp(edit_gate, ctx_doc, ctx_polished);

        let dh = g.concat(&[h, context]);
        let out = self.output.forward(g, store, dh);
        let guide_gate = gate_value(g, forced.guide, rows, |g| {
            let z = self.guide_gate.forward(g, store, h);
            g.sigmoid(z)
        });
        let style = self.style_proj.forward(g, store, src.style);
        let guided = g.lerp(guide_gate, out, style);
        let logits = self.vocab_out.forward(g, store, guided);
        let p_vocab = g.softmax(logits, None);

        let p_gen = gate_value(g, forced.copy, rows, |g| {
            let feats = g.concat(&[context, h, e]);
            let z = self.copy_gate.forward(g, store, feats);
            g.sigmoid(z)
        });
        let p_final = copy_distribution(g, p_vocab, attn_doc, p_gen, &src.extended_ids, src.width);
        Ok(DecoderStep {
            state: DecoderState { h, c, context },
            attn_doc,
            attn_polished,
            ctx_doc,
            ctx_polished,
            edit_gate,
            out,
            guide_gate,
            guided,
            p_vocab,
            p_gen,
            p_final,
        })
    }

    /// Teacher-forced decoding. `inputs[b]` starts with START; returns the
    /// per-step records.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedding,
        init: DecoderState,
        inputs: &[Vec<usize>],
        src: &Source,
    ) -> Result<Vec<DecoderStep>> {
        let steps = inputs.first().map_or(0, Vec::len);
        let mut state = init;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = inputs.iter().map(|r| r[t]).collect();
            let step = self.step(g, store, emb, &state, &prev, src, GateOverrides::default())?;
            state = step.state;
            out.push(step);
        }
        Ok(out)
    }
}

/// `p_gen * P_vocab + (1 - p_gen) * scatter(attention -> extended ids)`.
pub fn copy_distribution(
    g: &mut Graph,
    p_vocab: NodeId,
    attention: NodeId,
    p_gen: NodeId,
    extended_ids: &[usize],
    width: usize,
) -> NodeId {
    let padded = g.pad_cols(p_vocab, width);
    let copied = g.scatter_cols(attention, extended_ids, width);
    g.lerp(p_gen, padded, copied)
}

/// Mean `-log P_final(y_t)` over valid steps; probabilities below
/// [`PROB_FLOOR`] are clamped. Returns the loss and the number of clamped
/// targets.
pub fn sequence_loss(g: &mut Graph, p_final: &[NodeId], targets: &[Vec<Option<usize>>]) -> (NodeId, usize) {
    let rows = targets.len();
    let steps = p_final.len();
    let count = targets.iter().flatten().filter(|t| t.is_some()).count().max(1) as f64;
    let mut picks = Vec::with_capacity(steps);
    let mut weights = vec![0.0; rows * steps];
    let mut clamped = 0;
    for (t, &p) in p_final.iter().enumerate() {
        let idx: Vec<usize> = (0..rows).map(|b| targets[b].get(t).copied().flatten().unwrap_or(0)).collect();
        let pick = g.pick(p, &idx);
        for b in 0..rows {
            if targets[b].get(t).copied().flatten().is_some() {
                weights[b * steps + t] = -1.0 / count;
                if g.value(pick).get(b, 0) < PROB_FLOOR {
                    clamped += 1;
                }
            }
        }
        picks.push(g.log(pick, PROB_FLOOR));
    }
    let all = g.concat(&picks);
    (g.weighted_sum(all, &weights), clamped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 4, min_len: 10, max_len: 30 }
    }
}

/// Anything that maps decoder states plus the last token to next-token
/// log-probabilities over the extended vocabulary.
pub trait StepScorer {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    fn score(&self, hyps: &[(Self::State, usize)]) -> Result<Vec<(Self::State, Vec<f64>)>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending with STOP when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalised log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&STOP)
    }

    /// Output tokens without the trailing STOP.
    pub fn output(&self) -> &[usize] {
        if self.finished() {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Length-normalised beam search. Every STOP extension of a live hypothesis
/// is kept as a completion; the live beam holds the `beam` best unfinished
/// extensions. Runs until `max_len` steps or no live hypothesis remains.
/// STOP is disallowed before `min_len` tokens; PAD and START are never
/// emitted. Returns the best completion, or the best live hypothesis if none
/// completed.
pub fn beam_search<S: StepScorer>(scorer: &S, cfg: BeamConfig) -> Result<Hypothesis> {
    let hyps = beam_search_ranked(scorer, cfg)?;
    Ok(hyps.into_iter().next().unwrap_or(Hypothesis { tokens: vec![], log_prob: 0.0 }))
}

/// All completions (or the final live beam when nothing completed), best
/// first.
pub fn beam_search_ranked<S: StepScorer>(scorer: &S, cfg: BeamConfig) -> Result<Vec<Hypothesis>> {
    assert!(cfg.beam >= 1, "beam width must be positive");
    let mut live: Vec<(Hypothesis, S::State)> = vec![(Hypothesis { tokens: vec![], log_prob: 0.0 }, scorer.start()?)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let inputs: Vec<(S::State, usize)> =
            live.iter().map(|(h, s)| (s.clone(), h.tokens.last().copied().unwrap_or(START))).collect();
        let scored = scorer.score(&inputs)?;
        let mut candidates: Vec<(Hypothesis, usize)> = Vec::new();
        for (i, ((hyp, _), (_, logp))) in live.iter().zip(&scored).enumerate() {
            for (w, &lp) in logp.iter().enumerate() {
                if w == PAD || w == START || lp == f64::NEG_INFINITY {
                    continue;
                }
                if w == STOP && hyp.tokens.len() < cfg.min_len {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(w);
                let h = Hypothesis { tokens, log_prob: hyp.log_prob + lp };
                if w == STOP {
                    done.push(h);
                } else {
                    candidates.push((h, i));
                }
            }
        }
        // stable sort: equal scores keep expansion order
        candidates.sort_by(|a, b| b.0.score().total_cmp(&a.0.score()));
        live = candidates.into_iter().take(cfg.beam).map(|(h, parent)| (h, scored[parent].0.clone())).collect();
    }
    let pool = if done.is_empty() { live.into_iter().map(|(h, _)| h).collect() } else { done };
    Ok(ranked(pool))
}

/// Hypotheses sorted by score, best first; ties keep their input order.
pub fn ranked(mut hyps: Vec<Hypothesis>) -> Vec<Hypothesis> {
    hyps.sort_by(|a, b| b.score().total_cmp(&a.score()));
    hyps
}

/// Decoder bound to one source document, for beam search.
pub struct NeuralScorer<'a> {
    pub generator: &'a Generator,
    pub embedding: &'a Embedding,
    pub store: &'a ParamStore,
    /// `[len x 2H]` original and polished states of the single source.
    pub doc: Tensor,
    pub polished: Tensor,
    pub pooled: Tensor,
    pub style: Tensor,
    pub extended_ids: Vec<usize>,
    pub width: usize,
}

/// Plain-value decoder state for beam hypotheses.
#[derive(Clone, Debug)]
pub struct BeamState {
    pub h: Tensor,
    pub c: Tensor,
    pub context: Tensor,
}

fn repeat(t: &Tensor, times: usize) -> Tensor {
    Tensor::vstack(&vec![t; times])
}

impl StepScorer for NeuralScorer<'_> {
    type State = BeamState;

    fn start(&self) -> Result<BeamState> {
        let mut g = Graph::new();
        let pooled = g.constant(self.pooled.clone());
        let s = self.generator.init(&mut g, self.store, pooled);
        Ok(BeamState { h: g.value(s.h).clone(), c: g.value(s.c).clone(), context: g.value(s.context).clone() })
    }

    fn score(&self, hyps: &[(BeamState, usize)]) -> Result<Vec<(BeamState, Vec<f64>)>> {
        let n = hyps.len();
        let len = self.doc.rows();
        let mut g = Graph::new();
        let stack = |f: fn(&BeamState) -> &Tensor| Tensor::vstack(&hyps.iter().map(|(s, _)| f(s)).collect::<Vec<_>>());
        let state = DecoderState {
            h: g.constant(stack(|s| &s.h)),
            c: g.constant(stack(|s| &s.c)),
            context: g.constant(stack(|s| &s.context)),
        };
        let src = Source {
            doc: g.constant(repeat(&self.doc, n)),
            polished: g.constant(repeat(&self.polished, n)),
            mask: vec![true; n * len],
            len,
            extended_ids: self.extended_ids.iter().copied().cycle().take(n * len).collect(),
            width: self.width,
            style: g.constant(repeat(&self.style, n)),
        };
        let prev: Vec<usize> = hyps.iter().map(|(_, t)| *t).collect();
        let step = self.generator.step(&mut g, self.store, self.embedding, &state, &prev, &src, GateOverrides::default())?;
        let p = g.value(step.p_final);
        let (h, c, ctx) = (g.value(step.state.h), g.value(step.state.c), g.value(step.state.context));
        Ok((0..n)
            .map(|i| {
                let st = BeamState {
                    h: Tensor::from_vec(1, h.cols(), h.row(i).to_vec()),
                    c: Tensor::from_vec(1, c.cols(), c.row(i).to_vec()),
                    context: Tensor::from_vec(1, ctx.cols(), ctx.row(i).to_vec()),
                };
                (st, p.row(i).iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table, independent of state.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        type State = usize;

        fn start(&self) -> Result<usize> {
            Ok(0)
        }

        fn score(&self, hyps: &[(usize, usize)]) -> Result<Vec<(usize, Vec<f64>)>> {
            Ok(hyps.iter().map(|&(t, _)| (t + 1, self.0[t.min(self.0.len() - 1)].clone())).collect())
        }
    }

    fn logp(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn stop_suppressed_gives_max_len() {
        let mut row = logp(&[0.0, 0.2, 0.0, 0.5, 0.3]);
        row[STOP] = f64::NEG_INFINITY;
        let table = Table(vec![row]);
        let h = beam_search(&table, BeamConfig { beam: 3, min_len: 0, max_len: 7 }).unwrap();
        assert_eq!(h.tokens.len(), 7);
        assert!(!h.finished());
    }

    #[test]
    fn min_len_delays_stop() {
        let table = Table(vec![logp(&[0.0, 0.1, 0.0, 0.8, 0.1])]);
        let h = beam_search(&table, BeamConfig { beam: 2, min_len: 3, max_len: 10 }).unwrap();
        assert_eq!(h.output().len(), 3);
        assert!(h.finished());
    }

    #[test]
    fn copy_distribution_extremes() {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]));
        let attn = g.constant(Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]));
        let one = g.constant(Tensor::scalar(1.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let p = copy_distribution(&mut g, pv, attn, one, &[2, 5, 1], 6);
        assert_eq!(g.value(p).data(), &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0]);
        let p = copy_distribution(&mut g, pv, attn, zero, &[2, 5, 1], 6);
        assert_eq!(g.value(p).data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sequence_loss_edges() {
        let mut g = Graph::new();
        let point = g.constant(Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]));
        let (l, clamped) = sequence_loss(&mut g, &[point], &[vec![Some(1)]]);
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(clamped, 0);
        let (l, clamped) = sequence_loss(&mut g, &[point], &[vec![Some(0)]]);
        assert!((g.value(l).item() + PROB_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(clamped, 1);
        let uniform = g.constant(Tensor::full(2, 5, 0.2));
        let (l, _) = sequence_loss(&mut g, &[uniform, uniform], &[vec![Some(1), Some(2)], vec![Some(4), None]]);
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }
}
