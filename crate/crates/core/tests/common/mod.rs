#![allow(dead_code)]

use dahg::autograd::{Graph, NodeId};
use dahg::corpus::{Batch, Pair};
use dahg::model::{Dahg, Mode, ModelConfig};
use dahg::params::ParamStore;
use dahg::polish::GateKind;
use dahg::training::{generator_loss, GeneratorTerms, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn pair(id: &str, doc: &str, headline: &str, comments: u64) -> Pair {
    Pair::new(id, doc, headline, comments).unwrap()
}

/// Six pairs with 2-token documents and headlines, half of them attractive.
pub fn two_token_pairs() -> Vec<Pair> {
    vec![
        pair("a", "red fox", "fox runs", 30),
        pair("b", "blue fox", "fox sleeps", 2),
        pair("c", "red hen", "hen runs", 25),
        pair("d", "blue hen", "hen sleeps", 1),
        pair("e", "red cow", "cow zzz", 40),
        pair("f", "blue cow", "cow moo", 0),
    ]
}

pub fn tiny_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab,
        emb_dim: 3,
        hidden: 2,
        latent: 2,
        dec_hidden: 3,
        dec_output: 3,
        gate_hidden: 3,
        recon_hidden: 3,
        hops: 2,
        gate_kind: GateKind::Softmax,
        keep_prob: 0.9,
        init_std: 0.5,
    }
}

/// Small dimensions that still train quickly on the synthetic corpora.
pub fn desk_config() -> TrainConfig {
    let mut cfg = TrainConfig::parse(
        "batch-size=16\ndoc-len=20\nkl-anneal-batches=1000\nemb-dim=32\nhidden=32\nlatent=16\n\
         dec-hidden=32\ndec-output=32\ngate-hidden=32\nrecon-hidden=32",
    )
    .unwrap();
    cfg.seed = 1;
    cfg
}

/// `L_G + L_D` on one graph with a fixed noise seed, so repeated calls are
/// the same function of the parameters.
pub fn total_loss(model: &Dahg, batch: &Batch, cfg: &TrainConfig, seed: u64) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fwd = model.forward(&mut g, batch, Mode::Train(&mut rng)).unwrap();
    let adv = model.adversarial_for(&mut g, &fwd);
    let terms = GeneratorTerms {
        kl_content: fwd.kl_content,
        kl_style: fwd.kl_style,
        reconstruction: fwd.reconstruction,
        bow: fwd.bow,
        style_classifier: fwd.style_classifier,
        content_classifier: fwd.content_classifier,
        style_adversary: adv.style_adversary,
        content_adversary: adv.content_adversary,
        seq: fwd.seq,
    };
    let lg = generator_loss(&mut g, &terms, cfg, 0.7);
    let ld = g.add(adv.style_discriminator, adv.content_discriminator);
    let total = g.add(lg, ld);
    (g, total)
}

/// Module family a parameter belongs to, by name prefix.
pub fn family(name: &str) -> &'static str {
    if name.starts_with("embedding") || name.starts_with("bi_rnn_") {
        "encoders"
    } else if name.starts_with("vae.") {
        "vae heads"
    } else if name.starts_with("style.") || name.starts_with("content.") {
        "constraints"
    } else if name.starts_with("polish.") {
        "sru"
    } else if name.starts_with("dec.copy_gate") {
        "copy head"
    } else if name.starts_with("dec.") {
        "decoder"
    } else {
        "other"
    }
}

pub fn snapshot(store: &ParamStore, group: dahg::params::Group) -> Vec<Vec<u64>> {
    store
        .group_ids(group)
        .into_iter()
        .map(|id| store.value(id).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// Smaller still, for tests that only need the plumbing to run.
pub fn small_config() -> TrainConfig {
    let mut cfg = desk_config();
    for k in ["emb-dim", "hidden", "dec-hidden", "dec-output", "gate-hidden", "recon-hidden"] {
        cfg.set(k, "12").unwrap();
    }
    cfg.set("latent", "6").unwrap();
    cfg.batch_size = 8;
    cfg.min_len = 2;
    cfg.max_len = 8;
    cfg
}
