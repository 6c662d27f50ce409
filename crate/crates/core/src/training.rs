//! Configuration, KL annealing, the alternating discriminator/generator
//! update and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::corpus::{make_batch, Batch, Example, Limits, Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::BeamConfig;
use crate::model::{Dahg, Mode, ModelConfig};
use crate::params::{Adam, Group, ParamStore};
use crate::polish::GateKind;
use crate::retrieval::TfIdfIndex;
use crate::tensor::Tensor;

/// Every tunable of a run. Serialised as flat `key=value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub kl_anneal_batches: u64,
    pub beam: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub hops: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub dec_hidden: usize,
    pub dec_output: usize,
    pub gate_hidden: usize,
    pub recon_hidden: usize,
    pub gate_kind: GateKind,
    pub keep_prob: f64,
    pub init_std: f64,
    pub seed: u64,
    pub vocab_cap: usize,
    pub doc_len: usize,
    pub proto_len: usize,
    pub headline_len: usize,
    pub steps: u64,
    pub clip: f64,
    pub lambda_kl_c: f64,
    pub lambda_kl_s: f64,
    pub bow_weight: f64,
    pub constraint_weight: f64,
    pub seq_weight: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            kl_anneal_batches: 10_000,
            beam: 4,
            min_len: 10,
            max_len: 30,
            hops: 2,
            emb_dim: 64,
            hidden: 64,
            latent: 32,
            dec_hidden: 64,
            dec_output: 64,
            gate_hidden: 64,
            recon_hidden: 64,
            gate_kind: GateKind::Softmax,
            keep_prob: 0.8,
            init_std: 0.02,
            seed: 1,
            vocab_cap: 100_000,
            doc_len: 400,
            proto_len: 30,
            headline_len: 30,
            steps: 10_000,
            clip: 2.0,
            lambda_kl_c: 1.0,
            lambda_kl_s: 1.0,
            bow_weight: 1.0,
            constraint_weight: 1.0,
            seq_weight: 1.0,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 31] = [
        "batch-size",
        "lr",
        "kl-anneal-batches",
        "beam",
        "min-len",
        "max-len",
        "hops",
        "emb-dim",
        "hidden",
        "latent",
        "dec-hidden",
        "dec-output",
        "gate-hidden",
        "recon-hidden",
        "gate-kind",
        "keep-prob",
        "init-std",
        "seed",
        "vocab-cap",
        "doc-len",
        "proto-len",
        "headline-len",
        "steps",
        "clip",
        "lambda-kl-c",
        "lambda-kl-s",
        "bow-weight",
        "constraint-weight",
        "seq-weight",
        "log-every",
        "checkpoint-every",
    ];

    /// Sets one key; underscores and dashes are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "batch-size" => self.batch_size = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "kl-anneal-batches" => self.kl_anneal_batches = parse(k, value)?,
            "beam" => self.beam = parse(k, value)?,
            "min-len" => self.min_len = parse(k, value)?,
            "max-len" => self.max_len = parse(k, value)?,
            "hops" => self.hops = parse(k, value)?,
            "emb-dim" => self.emb_dim = parse(k, value)?,
            "hidden" => self.hidden = parse(k, value)?,
            "latent" => self.latent = parse(k, value)?,
            "dec-hidden" => self.dec_hidden = parse(k, value)?,
            "dec-output" => self.dec_output = parse(k, value)?,
            "gate-hidden" => self.gate_hidden = parse(k, value)?,
            "recon-hidden" => self.recon_hidden = parse(k, value)?,
            "gate-kind" => self.gate_kind = parse(k, value)?,
            "keep-prob" => self.keep_prob = parse(k, value)?,
            "init-std" => self.init_std = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "vocab-cap" => self.vocab_cap = parse(k, value)?,
            "doc-len" => self.doc_len = parse(k, value)?,
            "proto-len" => self.proto_len = parse(k, value)?,
            "headline-len" => self.headline_len = parse(k, value)?,
            "steps" => self.steps = parse(k, value)?,
            "clip" => self.clip = parse(k, value)?,
            "lambda-kl-c" => self.lambda_kl_c = parse(k, value)?,
            "lambda-kl-s" => self.lambda_kl_s = parse(k, value)?,
            "bow-weight" => self.bow_weight = parse(k, value)?,
            "constraint-weight" => self.constraint_weight = parse(k, value)?,
            "seq-weight" => self.seq_weight = parse(k, value)?,
            "log-every" => self.log_every = parse(k, value)?,
            "checkpoint-every" => self.checkpoint_every = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        for key in Self::KEYS {
            let v = &json[key.replace('-', "_")];
            let v = match v {
                serde_json::Value::String(s) => s.to_lowercase(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{key}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch-size", self.batch_size),
            ("beam", self.beam),
            ("max-len", self.max_len),
            ("hops", self.hops),
            ("emb-dim", self.emb_dim),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("dec-hidden", self.dec_hidden),
            ("dec-output", self.dec_output),
            ("gate-hidden", self.gate_hidden),
            ("recon-hidden", self.recon_hidden),
            ("doc-len", self.doc_len),
            ("proto-len", self.proto_len),
            ("headline-len", self.headline_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.vocab_cap < 5 {
            return Err(Error::Config("vocab-cap must be at least 5".into()));
        }
        if self.kl_anneal_batches == 0 {
            return Err(Error::Config("kl-anneal-batches must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && self.init_std > 0.0) {
            return Err(Error::Config("lr, clip and init-std must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config("keep-prob must lie in (0, 1]".into()));
        }
        if self.min_len > self.max_len {
            return Err(Error::Config("min-len exceeds max-len".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            latent: self.latent,
            dec_hidden: self.dec_hidden,
            dec_output: self.dec_output,
            gate_hidden: self.gate_hidden,
            recon_hidden: self.recon_hidden,
            hops: self.hops,
            gate_kind: self.gate_kind,
            keep_prob: self.keep_prob,
            init_std: self.init_std,
        }
    }

    pub fn limits(&self) -> Limits {
        Limits { doc: self.doc_len, proto: self.proto_len, headline: self.headline_len }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig { beam: self.beam, min_len: self.min_len, max_len: self.max_len }
    }

    pub fn kl_weight(&self, step: u64) -> f64 {
        kl_anneal(step, self.kl_anneal_batches)
    }
}

/// `key=value` pairs of a flat config file, in order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Linear ramp `min(step / horizon, 1)`.
pub fn kl_anneal(step: u64, horizon: u64) -> f64 {
    (step as f64 / horizon as f64).min(1.0)
}

/// Training pairs with their index and precomputed retrieval links.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub index: TfIdfIndex,
    pub vocab: Vocabulary,
    prototypes: Vec<usize>,
    similar: Vec<usize>,
}

impl TrainingSet {
    pub fn new(pairs: &[Pair], vocab_cap: usize) -> Result<Self> {
        let vocab = Vocabulary::build(pairs, vocab_cap)?;
        Self::with_vocab(pairs, vocab)
    }

    pub fn with_vocab(pairs: &[Pair], vocab: Vocabulary) -> Result<Self> {
        let index = TfIdfIndex::build(pairs)?;
        let mut prototypes = Vec::with_capacity(pairs.len());
        let mut similar = Vec::with_capacity(pairs.len());
        for p in index.pairs() {
            let proto = index.retrieve_prototype(p)?;
            let sim = index.retrieve_similar_document(proto)?;
            prototypes.push(index.position(&proto.id).expect("indexed"));
            similar.push(index.position(&sim.id).expect("indexed"));
        }
        Ok(Self { index, vocab, prototypes, similar })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        self.index.pairs()
    }

    pub fn prototype_of(&self, i: usize) -> &Pair {
        &self.index.pairs()[self.prototypes[i]]
    }

    /// Examples for rows `rows`, with fresh negatives from `rng`.
    pub fn examples(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Example<'_>>> {
        let pairs = self.index.pairs();
        rows.iter()
            .map(|&i| {
                let prototype = &pairs[self.prototypes[i]];
                let neg = self.index.sample_negatives(&prototype.id, rng)?;
                Ok(Example {
                    pair: &pairs[i],
                    prototype,
                    similar: &pairs[self.similar[i]],
                    attractive: neg.attractive,
                    unattractive: neg.unattractive,
                    random_doc: neg.random_doc,
                })
            })
            .collect()
    }

    pub fn batch(&self, rows: &[usize], rng: &mut ChaCha8Rng, limits: Limits) -> Result<Batch> {
        make_batch(&self.examples(rows, rng)?, &self.vocab, limits)
    }
}

/// Every loss component and diagnostic of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub kl_weight: f64,
    pub kl_content: f64,
    pub kl_style: f64,
    pub reconstruction: f64,
    pub bow: f64,
    pub style_classifier: f64,
    pub content_classifier: f64,
    pub style_adversary: f64,
    pub content_adversary: f64,
    pub style_discriminator: f64,
    pub content_discriminator: f64,
    pub seq: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub style_classifier_acc: f64,
    pub content_classifier_acc: f64,
    pub style_discriminator_acc: f64,
    pub content_discriminator_acc: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
    pub clamped_targets: usize,
}

/// Generator objective terms that get summed into `L_G`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub kl_content: NodeId,
    pub kl_style: NodeId,
    pub reconstruction: NodeId,
    pub bow: NodeId,
    pub style_classifier: NodeId,
    pub content_classifier: NodeId,
    pub style_adversary: NodeId,
    pub content_adversary: NodeId,
    pub seq: NodeId,
}

/// `L_G = kl_w (lc KL_c + ls KL_s) + recon + bow + constraints + seq`.
pub fn generator_loss(g: &mut Graph, t: &GeneratorTerms, cfg: &TrainConfig, kl_weight: f64) -> NodeId {
    let kc = g.scale(t.kl_content, kl_weight * cfg.lambda_kl_c);
    let ks = g.scale(t.kl_style, kl_weight * cfg.lambda_kl_s);
    let bow = g.scale(t.bow, cfg.bow_weight);
    let seq = g.scale(t.seq, cfg.seq_weight);
    let mut total = g.add(kc, ks);
    total = g.add(total, t.reconstruction);
    total = g.add(total, bow);
    for term in [t.style_classifier, t.content_classifier, t.style_adversary, t.content_adversary] {
        let w = g.scale(term, cfg.constraint_weight);
        total = g.add(total, w);
    }
    g.add(total, seq)
}

/// Points inside a training step at which parameters can be observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    BeforeDiscriminator,
    /// Also the state the generator update starts from.
    AfterDiscriminator,
    AfterGenerator,
}

pub struct Trainer {
    pub model: Dahg,
    pub adam: Adam,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Dahg::new(config.model_config(vocab.len()), &mut rng);
        let adam = Adam::new(&model.store, config.lr);
        Ok(Self { model, adam, vocab, config, step: 0, rng, order: Vec::new(), cursor: 0 })
    }

    /// Next batch in a seeded shuffled epoch order.
    pub fn next_batch(&mut self, data: &TrainingSet) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let size = self.config.batch_size.min(data.len());
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            rows.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        data.batch(&rows, &mut self.rng, self.config.limits())
    }

    /// One discriminator update on `L_D`, then one generator update on `L_G`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        self.train_step_observed(batch, |_, _| {})
    }

    /// [`Trainer::train_step`] with `observe` called on the parameters around
    /// each of the two updates.
    pub fn train_step_observed(&mut self, batch: &Batch, mut observe: impl FnMut(Phase, &ParamStore)) -> Result<StepMetrics> {
        let step = self.step;
        let kl_weight = self.config.kl_weight(step);
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, batch, Mode::Train(&mut self.rng))?;

        // Discriminator step on detached latents and representations.
        let mut gd = Graph::new();
        let detached: Vec<NodeId> =
            [fwd.style.sample, fwd.content.sample, fwd.proto_doc, fwd.random_doc, fwd.attractive, fwd.unattractive]
                .iter()
                .map(|&n| gd.constant(g.value(n).clone()))
                .collect();
        let adv_d = self.model.adversarial(&mut gd, detached[0], detached[1], detached[2], detached[3], detached[4], detached[5]);
        let loss_d = gd.add(adv_d.style_discriminator, adv_d.content_discriminator);
        let value = |g: &Graph, n: NodeId| g.value(n).item();
        check_finite("discriminator", value(&gd, loss_d), step)?;
        let grads_d = gd.backward(loss_d);
        observe(Phase::BeforeDiscriminator, &self.model.store);
        let grad_norm_d = self.adam.step(&mut self.model.store, &grads_d, Group::Discriminator, Some(self.config.clip));
        observe(Phase::AfterDiscriminator, &self.model.store);

        // Generator step against the updated discriminators.
        let adv_g = self.model.adversarial_for(&mut g, &fwd);
        let terms = GeneratorTerms {
            kl_content: fwd.kl_content,
            kl_style: fwd.kl_style,
            reconstruction: fwd.reconstruction,
            bow: fwd.bow,
            style_classifier: fwd.style_classifier,
            content_classifier: fwd.content_classifier,
            style_adversary: adv_g.style_adversary,
            content_adversary: adv_g.content_adversary,
            seq: fwd.seq,
        };
        let loss_g = generator_loss(&mut g, &terms, &self.config, kl_weight);
        let metrics = StepMetrics {
            step,
            kl_weight,
            kl_content: value(&g, terms.kl_content),
            kl_style: value(&g, terms.kl_style),
            reconstruction: value(&g, terms.reconstruction),
            bow: value(&g, terms.bow),
            style_classifier: value(&g, terms.style_classifier),
            content_classifier: value(&g, terms.content_classifier),
            style_adversary: value(&g, terms.style_adversary),
            content_adversary: value(&g, terms.content_adversary),
            style_discriminator: value(&gd, adv_d.style_discriminator),
            content_discriminator: value(&gd, adv_d.content_discriminator),
            seq: value(&g, terms.seq),
            loss_g: value(&g, loss_g),
            loss_d: value(&gd, loss_d),
            style_classifier_acc: fwd.style_classifier_acc,
            content_classifier_acc: fwd.content_classifier_acc,
            style_discriminator_acc: adv_d.style_discriminator_acc,
            content_discriminator_acc: adv_d.content_discriminator_acc,
            grad_norm_g: 0.0,
            grad_norm_d,
            clamped_targets: fwd.clamped_targets,
        };
        for (name, v) in [
            ("kl_content", metrics.kl_content),
            ("kl_style", metrics.kl_style),
            ("reconstruction", metrics.reconstruction),
            ("bow", metrics.bow),
            ("style_classifier", metrics.style_classifier),
            ("content_classifier", metrics.content_classifier),
            ("style_adversary", metrics.style_adversary),
            ("content_adversary", metrics.content_adversary),
            ("seq", metrics.seq),
        ] {
            check_finite(name, v, step)?;
        }
        let grads_g = g.backward(loss_g);
        let grad_norm_g = self.adam.step(&mut self.model.store, &grads_g, Group::Generator, Some(self.config.clip));
        observe(Phase::AfterGenerator, &self.model.store);
        self.step += 1;
        Ok(StepMetrics { grad_norm_g, ..metrics })
    }

    /// Runs `steps` steps, handing every metric row to `on_step`.
    pub fn train(
        &mut self,
        data: &TrainingSet,
        steps: u64,
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let batch = self.next_batch(data)?;
            let m = self.train_step(&batch)?;
            on_step(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }

    /// Loss components on `batch` without updating anything, using a fixed
    /// noise seed.
    pub fn evaluate_batch(&self, batch: &Batch, seed: u64) -> Result<StepMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, batch, Mode::Train(&mut rng))?;
        let adv = self.model.adversarial_for(&mut g, &fwd);
        let kl_weight = self.config.kl_weight(self.step);
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
        let loss_g = generator_loss(&mut g, &terms, &self.config, kl_weight);
        let loss_d = g.add(adv.style_discriminator, adv.content_discriminator);
        let v = |n: NodeId| g.value(n).item();
        Ok(StepMetrics {
            step: self.step,
            kl_weight,
            kl_content: v(terms.kl_content),
            kl_style: v(terms.kl_style),
            reconstruction: v(terms.reconstruction),
            bow: v(terms.bow),
            style_classifier: v(terms.style_classifier),
            content_classifier: v(terms.content_classifier),
            style_adversary: v(terms.style_adversary),
            content_adversary: v(terms.content_adversary),
            style_discriminator: v(adv.style_discriminator),
            content_discriminator: v(adv.content_discriminator),
            seq: v(terms.seq),
            loss_g: v(loss_g),
            loss_d: v(loss_d),
            style_classifier_acc: fwd.style_classifier_acc,
            content_classifier_acc: fwd.content_classifier_acc,
            style_discriminator_acc: adv.style_discriminator_acc,
            content_discriminator_acc: adv.content_discriminator_acc,
            grad_norm_g: 0.0,
            grad_norm_d: 0.0,
            clamped_targets: fwd.clamped_targets,
        })
    }
}

fn check_finite(component: &str, v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { component: component.to_owned(), step })
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DAHGCKPT";

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    vocab: Vec<String>,
    step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    order: Vec<usize>,
    cursor: usize,
    adam_lr: f64,
    adam_steps: Vec<u64>,
    params: Vec<ParamMeta>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    (0..s.len()).step_by(2).map(|i| s.get(i..i + 2).and_then(|h| u8::from_str_radix(h, 16).ok())).collect()
}

impl Trainer {
    /// Serialises parameters, optimiser moments, step, data order and RNG
    /// state. Layout: magic, version (u32 LE), header length (u64 LE), JSON
    /// header, f64 LE payload, SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            config: self.config.clone(),
            model: self.model.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.step,
            rng_seed: hex(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            order: self.order.clone(),
            cursor: self.cursor,
            adam_lr: self.adam.lr,
            adam_steps: self.adam.steps.clone(),
            params: store
                .iter()
                .map(|(_, p)| ParamMeta { name: p.name.clone(), group: p.group, rows: p.value.rows(), cols: p.value.cols() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(32 + header.len() + 24 * store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = store.iter().map(|(_, p)| &p.value).chain(&self.adam.first).chain(&self.adam.second);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { what: "checkpoint", reason: reason.to_owned() };
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or truncated file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("bad header length"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        let mut trainer = Trainer::new(header.config, vocab)?;
        if trainer.model.config != header.model {
            return Err(corrupt("model configuration does not match training configuration"));
        }
        let store = &mut trainer.model.store;
        if store.len() != header.params.len() || header.adam_steps.len() != header.params.len() {
            return Err(corrupt("parameter count mismatch"));
        }
        for ((_, p), meta) in store.iter().zip(&header.params) {
            if p.name != meta.name || p.group != meta.group || p.value.shape() != (meta.rows, meta.cols) {
                return Err(corrupt(&format!("parameter {} does not match", meta.name)));
            }
        }
        let mut payload = body[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let expected = 3 * store.num_scalars();
        if (body.len() - header_end) != expected * 8 {
            return Err(corrupt("payload size mismatch"));
        }
        let mut read = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v = payload.next().expect("size checked");
            }
        };
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            read(store.value_mut(id));
        }
        for t in trainer.adam.first.iter_mut().chain(trainer.adam.second.iter_mut()) {
            read(t);
        }
        let seed: [u8; 32] = unhex(&header.rng_seed)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| corrupt("bad rng seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| corrupt("bad rng position"))?);
        trainer.rng = rng;
        trainer.adam.lr = header.adam_lr;
        trainer.adam.steps = header.adam_steps;
        trainer.step = header.step;
        trainer.order = header.order;
        trainer.cursor = header.cursor;
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = resolve_checkpoint(path)?;
        Self::from_bytes(&fs::read(&path).map_err(crate::error::at(&path))?)
    }

    /// Writes `ckpt-<step>.bin` into `dir` and points `dir/latest` at it.
    pub fn save_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let name = format!("ckpt-{}.bin", self.step);
        let path = dir.join(&name);
        self.save_checkpoint(&path)?;
        fs::write(dir.join("latest"), format!("{name}\n"))?;
        Ok(path)
    }
}

/// Trains for `steps` steps, appending every `log_every`-th metric row to
/// `dir/metrics.csv` and checkpointing every `checkpoint_every` steps and at
/// the end. Returns the full metric trace of this call.
pub fn train_to_dir(trainer: &mut Trainer, data: &TrainingSet, steps: u64, dir: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let log_path = dir.join("metrics.csv");
    let fresh = !log_path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut log = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let (log_every, ckpt_every) = (trainer.config.log_every.max(1), trainer.config.checkpoint_every);
    let trace = trainer.train(data, steps, |t, m| {
        if m.step % log_every == 0 {
            log.serialize(m)?;
        }
        if ckpt_every > 0 && t.step % ckpt_every == 0 {
            t.save_to_dir(dir)?;
        }
        Ok(())
    })?;
    log.flush()?;
    trainer.save_to_dir(dir)?;
    Ok(trace)
}

/// A checkpoint file, or a directory whose `latest` file names one.
pub fn resolve_checkpoint(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if path.is_dir() {
        let latest = path.join("latest");
        let name = fs::read_to_string(&latest).map_err(crate::error::at(&latest))?;
        Ok(path.join(name.trim()))
    } else {
        Ok(path.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_ramp() {
        assert_eq!(kl_anneal(0, 10_000), 0.0);
        assert_eq!(kl_anneal(5_000, 10_000), 0.5);
        assert_eq!(kl_anneal(10_000, 10_000), 1.0);
        assert_eq!(kl_anneal(50_000, 10_000), 1.0);
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.set("batch_size", "8").unwrap();
        cfg.set("gate-kind", "sigmoid").unwrap();
        cfg.set("lr", "0.003").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("hops=0").is_err());
        assert!(TrainConfig::parse("hops").is_err());
        assert_eq!(TrainConfig::parse("# comment\nbeam = 1  # trailing\n").unwrap().beam, 1);
    }
}
