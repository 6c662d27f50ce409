//! Variational feature extractor that splits a prototype headline into a
//! content latent `c` and a style latent `s`, and the classifier /
//! adversarial-discriminator constraints that keep the two spaces apart.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, NodeId};
use crate::corpus::{PaddedIds, START, STOP};
use crate::encoders::Embedding;
use crate::error::Result;
use crate::layers::{Linear, LstmCell};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Diagonal Gaussian posterior and the sample drawn from it.
#[derive(Clone, Debug)]
pub struct LatentSpace {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub sample: NodeId,
    /// Standard-normal noise used for the sample (zeros in inference mode).
    pub noise: Tensor,
}

/// `mu + exp(0.5 * logvar) * noise`.
pub fn reparameterize(g: &mut Graph, mu: NodeId, logvar: NodeId, noise: Tensor) -> NodeId {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let eps = g.constant(noise);
    let spread = g.mul(std, eps);
    g.add(mu, spread)
}

/// KL(N(mu, exp(logvar)) || N(0, I)) for one posterior.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Batch mean of the per-row Gaussian KL to the standard normal prior.
pub fn kl_to_standard_normal(g: &mut Graph, mu: NodeId, logvar: NodeId) -> NodeId {
    let rows = g.value(mu).rows() as f64;
    let mu2 = g.mul(mu, mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var);
    let b = g.sub(a, logvar);
    let total = g.sum(b);
    let n = g.value(mu).len() as f64;
    // sum(mu^2 + e^lv - lv) - n, halved and averaged over rows
    let shifted = g.add_scalar(total, -n);
    g.scale(shifted, 0.5 / rows)
}

/// Mean negative log-likelihood of `targets[b][t]` under per-step
/// log-probability matrices `logp[t]: [B x V]`; `None` targets are skipped.
pub fn mean_step_nll(g: &mut Graph, logp: &[NodeId], targets: &[Vec<Option<usize>>]) -> NodeId {
    let rows = targets.len();
    let mut picks = Vec::with_capacity(logp.len());
    let mut weights = vec![0.0; rows * logp.len()];
    let count = targets.iter().flatten().filter(|t| t.is_some()).count().max(1) as f64;
    for (t, &lp) in logp.iter().enumerate() {
        let idx: Vec<usize> = (0..rows).map(|b| targets[b].get(t).copied().flatten().unwrap_or(0)).collect();
        picks.push(g.pick(lp, &idx));
        for b in 0..rows {
            if targets[b].get(t).copied().flatten().is_some() {
                weights[b * logp.len() + t] = -1.0 / count;
            }
        }
    }
    let all = g.concat(&picks);
    g.weighted_sum(all, &weights)
}

/// Teacher-forcing inputs (`START` + tokens) and targets (tokens + `STOP`)
/// for each row's valid prefix.
pub fn teacher_forcing(seq: &PaddedIds) -> (Vec<Vec<usize>>, Vec<Vec<Option<usize>>>) {
    let steps = seq.lengths.iter().max().map_or(1, |m| m + 1);
    let mut inputs = Vec::with_capacity(seq.rows);
    let mut targets = Vec::with_capacity(seq.rows);
    for r in 0..seq.rows {
        let valid = seq.valid(r);
        let mut inp = vec![START];
        inp.extend_from_slice(valid);
        let mut tgt: Vec<Option<usize>> = valid.iter().copied().map(Some).collect();
        tgt.push(Some(STOP));
        inp.resize(steps, crate::corpus::PAD);
        tgt.resize(steps, None);
        inputs.push(inp);
        targets.push(tgt);
    }
    (inputs, targets)
}

/// Posterior heads over the pooled prototype-headline encoding.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub content: Linear,
    pub style: Linear,
    pub latent: usize,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, latent: usize, std: f64, rng: &mut R) -> Self {
        Self {
            content: Linear::new(store, "vae.content_head", Group::Generator, input, 2 * latent, std, rng),
            style: Linear::new(store, "vae.style_head", Group::Generator, input, 2 * latent, std, rng),
            latent,
        }
    }

    fn head<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        head: &Linear,
        pooled: NodeId,
        rng: Option<&mut R>,
    ) -> LatentSpace {
        let out = head.forward(g, store, pooled);
        let mu = g.slice_cols(out, 0, self.latent);
        let logvar = g.slice_cols(out, self.latent, self.latent);
        let rows = g.value(pooled).rows();
        let noise = match rng {
            Some(rng) => {
                Tensor::from_vec(rows, self.latent, (0..rows * self.latent).map(|_| StandardNormal.sample(rng)).collect())
            }
            None => Tensor::zeros(rows, self.latent),
        };
        let sample = reparameterize(g, mu, logvar, noise.clone());
        LatentSpace { mu, logvar, sample, noise }
    }

    /// Content posterior; `rng` draws noise in training mode, `None` sets the
    /// sample to the mean.
    pub fn encode_content<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: NodeId,
        rng: Option<&mut R>,
    ) -> LatentSpace {
        self.head(g, store, &self.content, pooled, rng)
    }

    pub fn encode_style<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: NodeId,
        rng: Option<&mut R>,
    ) -> LatentSpace {
        self.head(g, store, &self.style, pooled, rng)
    }
}

/// Single-layer LSTM decoder that rebuilds the prototype headline from
/// `[c; s]`.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub bridge: Linear,
    pub cell: LstmCell,
    pub output: Linear,
}

impl Reconstructor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        latent: usize,
        emb_dim: usize,
        hidden: usize,
        vocab: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            bridge: Linear::new(store, "vae.recon_bridge", Group::Generator, 2 * latent, 2 * hidden, std, rng),
            cell: LstmCell::new(store, "vae.recon_lstm", Group::Generator, emb_dim, hidden, std, rng),
            output: Linear::new(store, "vae.recon_out", Group::Generator, hidden, vocab, std, rng),
        }
    }

    /// Per-step log-probabilities under teacher forcing.
    pub fn step_log_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedding,
        latent: NodeId,
        inputs: &[Vec<usize>],
    ) -> Result<Vec<NodeId>> {
        let hidden = self.cell.hidden;
        let init = self.bridge.forward(g, store, latent);
        let mut h = g.slice_cols(init, 0, hidden);
        let mut c = g.slice_cols(init, hidden, hidden);
        let steps = inputs.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = inputs.iter().map(|r| r[t]).collect();
            let x = emb.lookup(g, store, &ids)?;
            (h, c) = self.cell.step(g, store, x, h, c);
            let logits = self.output.forward(g, store, h);
            out.push(g.log_softmax(logits));
        }
        Ok(out)
    }

    /// Mean token NLL of the headline (plus `STOP`) given `[c; s]`.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embedding,
        latent: NodeId,
        headline: &PaddedIds,
    ) -> Result<NodeId> {
        let (inputs, targets) = teacher_forcing(headline);
        let logp = self.step_log_probs(g, store, emb, latent, &inputs)?;
        Ok(mean_step_nll(g, &logp, &targets))
    }
}

/// Bag-of-words head: one distribution over the vocabulary from `[c; s]`.
#[derive(Clone, Debug)]
pub struct BowHead {
    pub proj: Linear,
}

impl BowHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, latent: usize, vocab: usize, std: f64, rng: &mut R) -> Self {
        Self { proj: Linear::new(store, "vae.bow", Group::Generator, 2 * latent, vocab, std, rng) }
    }

    pub fn log_probs(&self, g: &mut Graph, store: &ParamStore, latent: NodeId) -> NodeId {
        let logits = self.proj.forward(g, store, latent);
        g.log_softmax(logits)
    }

    /// Mean NLL of every non-PAD headline token under the bag distribution.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, latent: NodeId, headline: &PaddedIds) -> NodeId {
        let logp = self.log_probs(g, store, latent);
        bow_nll(g, logp, headline)
    }
}

/// `-mean log p(w)` over all valid tokens of all rows, given `logp: [B x V]`.
pub fn bow_nll(g: &mut Graph, logp: NodeId, headline: &PaddedIds) -> NodeId {
    let vocab = g.value(logp).cols();
    let total: usize = headline.lengths.iter().sum();
    let mut weights = vec![0.0; headline.rows * vocab];
    for r in 0..headline.rows {
        for &w in headline.valid(r) {
            weights[r * vocab + w] -= 1.0 / total.max(1) as f64;
        }
    }
    g.weighted_sum(logp, &weights)
}

/// Two-way softmax over `[latent; candidate]`; column 0 is "match".
#[derive(Clone, Debug)]
pub struct TwoWayScorer {
    pub linear: Linear,
}

impl TwoWayScorer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self { linear: Linear::new(store, name, group, input, 2, std, rng) }
    }

    pub fn log_probs(&self, g: &mut Graph, store: &ParamStore, latent: NodeId, candidate: NodeId) -> NodeId {
        let x = g.concat(&[latent, candidate]);
        let logits = self.linear.forward(g, store, x);
        g.log_softmax(logits)
    }

    /// Match probability per row.
    pub fn probs(&self, g: &mut Graph, store: &ParamStore, latent: NodeId, candidate: NodeId) -> Vec<f64> {
        let lp = self.log_probs(g, store, latent, candidate);
        let v = g.value(lp);
        (0..v.rows()).map(|r| v.get(r, 0).exp()).collect()
    }
}

/// `-log P(pos) - log(1 - P(neg))` averaged over the batch, plus the
/// fraction of the 2B binary decisions that are correct.
pub fn contrastive_loss(
    g: &mut Graph,
    store: &ParamStore,
    scorer: &TwoWayScorer,
    latent: NodeId,
    positive: NodeId,
    negative: NodeId,
) -> (NodeId, f64) {
    let lp_pos = scorer.log_probs(g, store, latent, positive);
    let lp_neg = scorer.log_probs(g, store, latent, negative);
    let rows = g.value(lp_pos).rows();
    let pos = g.pick(lp_pos, &vec![0; rows]);
    let neg = g.pick(lp_neg, &vec![1; rows]);
    let both = g.concat(&[pos, neg]);
    let loss = g.weighted_sum(both, &vec![-1.0 / rows as f64; 2 * rows]);
    let (pv, nv) = (g.value(lp_pos), g.value(lp_neg));
    let correct = (0..rows).filter(|&r| pv.get(r, 0).exp() > 0.5).count()
        + (0..rows).filter(|&r| nv.get(r, 0).exp() < 0.5).count();
    (loss, correct as f64 / (2 * rows) as f64)
}

/// `-log(1 - D(pos))` averaged over the batch.
pub fn adversary_loss(g: &mut Graph, store: &ParamStore, scorer: &TwoWayScorer, latent: NodeId, positive: NodeId) -> NodeId {
    let lp = scorer.log_probs(g, store, latent, positive);
    let rows = g.value(lp).rows();
    let mismatch = g.pick(lp, &vec![1; rows]);
    g.weighted_sum(mismatch, &vec![-1.0 / rows as f64; rows])
}

/// Classifier (generator group) plus adversarial discriminator
/// (discriminator group) attached to one latent space.
#[derive(Clone, Debug)]
pub struct SpaceConstraint {
    pub classifier: TwoWayScorer,
    pub discriminator: TwoWayScorer,
}

#[derive(Clone, Debug)]
pub struct ConstraintOutput {
    pub classifier_loss: NodeId,
    pub discriminator_loss: NodeId,
    pub adversary_loss: NodeId,
    pub classifier_acc: f64,
    pub discriminator_acc: f64,
}

impl SpaceConstraint {
    /// `classifier_input` / `discriminator_input` are the candidate widths.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        latent: usize,
        classifier_input: usize,
        discriminator_input: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            classifier: TwoWayScorer::new(
                store,
                &format!("{name}.classifier"),
                Group::Generator,
                latent + classifier_input,
                std,
                rng,
            ),
            discriminator: TwoWayScorer::new(
                store,
                &format!("{name}.discriminator"),
                Group::Discriminator,
                latent + discriminator_input,
                std,
                rng,
            ),
        }
    }

    /// All three losses of the constraint for one latent space.
    ///
    /// Style space: classifier over (Y^a, Y^n), discriminator over (X^r, X^q).
    /// Content space: classifier over (X^r, X^s), discriminator over (Y^a, Y^n).
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: NodeId,
        cls_pos: NodeId,
        cls_neg: NodeId,
        disc_pos: NodeId,
        disc_neg: NodeId,
    ) -> ConstraintOutput {
        let (classifier_loss, classifier_acc) = contrastive_loss(g, store, &self.classifier, latent, cls_pos, cls_neg);
        let (discriminator_loss, discriminator_acc) =
            contrastive_loss(g, store, &self.discriminator, latent, disc_pos, disc_neg);
        let adversary_loss = adversary_loss(g, store, &self.discriminator, latent, disc_pos);
        ConstraintOutput { classifier_loss, discriminator_loss, adversary_loss, classifier_acc, discriminator_acc }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reparameterization_identities() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let lv = g.constant(Tensor::zeros(1, 3));
        let s = reparameterize(&mut g, mu, lv, Tensor::zeros(1, 3));
        assert_eq!(g.value(s), g.value(mu));
        let s = reparameterize(&mut g, mu, lv, Tensor::full(1, 3, 1.0));
        assert_eq!(g.value(s).data(), &[1.5, 0.0, 3.0]);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(2, 1, vec![1.0, 0.0]));
        let lv = g.constant(Tensor::zeros(2, 1));
        let kl = kl_to_standard_normal(&mut g, mu, lv);
        assert!((g.value(kl).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::new();
        let v = 7;
        let logits = g.constant(Tensor::zeros(2, v));
        let lp = g.log_softmax(logits);
        let l = mean_step_nll(&mut g, &[lp, lp], &[vec![Some(3), Some(1)], vec![Some(5), None]]);
        assert!((g.value(l).item() - (v as f64).ln()).abs() < 1e-12);
        let bow = bow_nll(&mut g, lp, &PaddedIds::from_rows(&[vec![4, 5], vec![6]], 3));
        assert!((g.value(bow).item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_gives_zero_loss() {
        let mut g = Graph::new();
        let mut logits = Tensor::full(1, 5, -800.0);
        logits.set(0, 4, 0.0);
        let x = g.constant(logits);
        let lp = g.log_softmax(x);
        let l = mean_step_nll(&mut g, &[lp], &[vec![Some(4)]]);
        assert_eq!(g.value(l).item(), 0.0);
        let bow = bow_nll(&mut g, lp, &PaddedIds::from_rows(&[vec![4, 4, 4]], 3));
        assert_eq!(g.value(bow).item(), 0.0);
    }

    #[test]
    fn teacher_forcing_shifts_and_pads() {
        let (inp, tgt) = teacher_forcing(&PaddedIds::from_rows(&[vec![7, 8], vec![9]], 4));
        assert_eq!(inp, vec![vec![START, 7, 8], vec![START, 9, 0]]);
        assert_eq!(tgt, vec![vec![Some(7), Some(8), Some(STOP)], vec![Some(9), Some(STOP), None]]);
    }

    #[test]
    fn equal_logits_give_log_two_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = SpaceConstraint::new(&mut store, "style", 2, 3, 3, 0.1, &mut rng);
        for id in store.group_ids(Group::Discriminator) {
            let v = store.value_mut(id);
            *v = Tensor::zeros(v.rows(), v.cols());
        }
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(4, 2, 0.3));
        let a = g.constant(Tensor::full(4, 3, -0.2));
        let b = g.constant(Tensor::full(4, 3, 0.9));
        let out = c.evaluate(&mut g, &store, s, a, b, a, b);
        let ln2 = 2f64.ln();
        assert!((g.value(out.discriminator_loss).item() - 2.0 * ln2).abs() < 1e-12);
        assert!((g.value(out.adversary_loss).item() - ln2).abs() < 1e-12);
        assert!(g.value(out.classifier_loss).item() > 0.0);
    }
}
