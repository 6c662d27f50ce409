//! The full headline model: shared embedding, document and headline
//! encoders, the disentangling VAE with its constraints, highlight polish and
//! the generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::corpus::{decode_extended, encode_extended, Batch, Limits, PaddedIds, Vocabulary, STOP};
use crate::disentangle::{
    adversary_loss, contrastive_loss, kl_to_standard_normal, teacher_forcing, BowHead, FeatureExtractor,
    LatentSpace, Reconstructor, SpaceConstraint,
};
use crate::encoders::{BiLstm, Embedding, EncoderStates};
use crate::error::Result;
use crate::generator::{
    beam_search, sequence_loss, BeamConfig, DecoderStep, Generator, GeneratorDims, NeuralScorer, Source,
};
use crate::params::ParamStore;
use crate::polish::{GateKind, PolishState, Polisher};
use crate::retrieval::TfIdfIndex;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub emb_dim: usize,
    /// Per-direction encoder width H; states are 2H wide.
    pub hidden: usize,
    pub latent: usize,
    pub dec_hidden: usize,
    pub dec_output: usize,
    pub gate_hidden: usize,
    pub recon_hidden: usize,
    pub hops: usize,
    pub gate_kind: GateKind,
    pub keep_prob: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn desk(vocab: usize) -> Self {
        Self {
            vocab,
            emb_dim: 64,
            hidden: 64,
            latent: 32,
            dec_hidden: 64,
            dec_output: 64,
            gate_hidden: 64,
            recon_hidden: 64,
            hops: 2,
            gate_kind: GateKind::Softmax,
            keep_prob: 0.8,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dahg {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub doc_encoder: BiLstm,
    pub headline_encoder: BiLstm,
    pub extractor: FeatureExtractor,
    pub reconstructor: Reconstructor,
    pub bow: BowHead,
    pub style: SpaceConstraint,
    pub content: SpaceConstraint,
    pub polisher: Polisher,
    pub generator: Generator,
}

/// Whether latent sampling and dropout are active.
pub enum Mode<'r, R: Rng + ?Sized> {
    Train(&'r mut R),
    Eval,
}

/// Every generator-side quantity of one batch. The discriminator parameters
/// are not touched here.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub doc: EncoderStates,
    pub proto_doc: NodeId,
    pub similar_doc: NodeId,
    pub random_doc: NodeId,
    pub proto_headline: NodeId,
    pub attractive: NodeId,
    pub unattractive: NodeId,
    pub content: LatentSpace,
    pub style: LatentSpace,
    pub kl_content: NodeId,
    pub kl_style: NodeId,
    pub reconstruction: NodeId,
    pub bow: NodeId,
    pub style_classifier: NodeId,
    pub style_classifier_acc: f64,
    pub content_classifier: NodeId,
    pub content_classifier_acc: f64,
    pub polish: PolishState,
    pub steps: Vec<DecoderStep>,
    pub seq: NodeId,
    pub clamped_targets: usize,
}

/// Discriminator and adversary terms of both constraints.
#[derive(Clone, Debug)]
pub struct AdversarialTerms {
    pub style_discriminator: NodeId,
    pub content_discriminator: NodeId,
    pub style_adversary: NodeId,
    pub content_adversary: NodeId,
    pub style_discriminator_acc: f64,
    pub content_discriminator_acc: f64,
}

/// A generated headline with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: Vec<String>,
    pub prototype_id: String,
    pub score: f64,
}

impl Dahg {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let std = config.init_std;
        let mut store = ParamStore::new();
        let two_h = 2 * config.hidden;
        let embedding = Embedding::new(&mut store, config.vocab, config.emb_dim, std, rng);
        let doc_encoder = BiLstm::new(&mut store, "bi_rnn_x", config.emb_dim, config.hidden, std, rng);
        let headline_encoder = BiLstm::new(&mut store, "bi_rnn_y", config.emb_dim, config.hidden, std, rng);
        let extractor = FeatureExtractor::new(&mut store, two_h, config.latent, std, rng);
        let reconstructor =
            Reconstructor::new(&mut store, config.latent, config.emb_dim, config.recon_hidden, config.vocab, std, rng);
        let bow = BowHead::new(&mut store, config.latent, config.vocab, std, rng);
        let style = SpaceConstraint::new(&mut store, "style", config.latent, two_h, two_h, std, rng);
        let content = SpaceConstraint::new(&mut store, "content", config.latent, two_h, two_h, std, rng);
        let polisher = Polisher::new(&mut store, two_h, config.latent, config.gate_hidden, config.gate_kind, std, rng);
        let generator = Generator::new(
            &mut store,
            GeneratorDims {
                emb: config.emb_dim,
                source: two_h,
                hidden: config.dec_hidden,
                output: config.dec_output,
                latent: config.latent,
                vocab: config.vocab,
            },
            std,
            rng,
        );
        Self {
            config,
            store,
            embedding,
            doc_encoder,
            headline_encoder,
            extractor,
            reconstructor,
            bow,
            style,
            content,
            polisher,
            generator,
        }
    }

    /// Content and style posteriors of a batch of prototype headlines.
    pub fn encode_prototype<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        headline: &PaddedIds,
        mode: &mut Mode<'_, R>,
    ) -> Result<(NodeId, LatentSpace, LatentSpace)> {
        let enc = self.headline_encoder.encode(g, &self.store, &self.embedding, headline)?;
        let mut pooled = enc.pooled;
        if let Mode::Train(rng) = mode {
            let keep = self.config.keep_prob;
            if keep < 1.0 {
                let (r, c) = g.value(pooled).shape();
                let mask = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let m = g.constant(Tensor::from_vec(r, c, mask));
                pooled = g.mul(pooled, m);
            }
        }
        let (content, style) = match mode {
            Mode::Train(rng) => (
                self.extractor.encode_content(g, &self.store, pooled, Some(&mut **rng)),
                self.extractor.encode_style(g, &self.store, pooled, Some(&mut **rng)),
            ),
            Mode::Eval => (
                self.extractor.encode_content::<R>(g, &self.store, pooled, None),
                self.extractor.encode_style::<R>(g, &self.store, pooled, None),
            ),
        };
        Ok((enc.pooled, content, style))
    }

    fn pooled(&self, g: &mut Graph, enc: &BiLstm, ids: &PaddedIds) -> Result<NodeId> {
        Ok(enc.encode(g, &self.store, &self.embedding, ids)?.pooled)
    }

    /// Builds the decoder's view of the encoded source.
    pub fn source(&self, doc: &EncoderStates, polished: NodeId, batch_ext: &PaddedIds, width: usize, style: NodeId) -> Source {
        let ext = batch_ext.trimmed();
        Source {
            doc: doc.states,
            polished,
            mask: doc.mask.clone(),
            len: doc.len,
            extended_ids: ext.ids,
            width,
            style,
        }
    }

    /// Generator-side forward pass over a training batch.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, batch: &Batch, mut mode: Mode<'_, R>) -> Result<BatchForward> {
        let store = &self.store;
        let doc = self.doc_encoder.encode(g, store, &self.embedding, &batch.doc)?;
        let proto_doc = self.pooled(g, &self.doc_encoder, &batch.proto_doc)?;
        let similar_doc = self.pooled(g, &self.doc_encoder, &batch.similar_doc)?;
        let random_doc = self.pooled(g, &self.doc_encoder, &batch.random_doc)?;
        let attractive = self.pooled(g, &self.headline_encoder, &batch.attractive_headline)?;
        let unattractive = self.pooled(g, &self.headline_encoder, &batch.unattractive_headline)?;
        let (proto_headline, content, style) = self.encode_prototype(g, &batch.proto_headline, &mut mode)?;

        let kl_content = kl_to_standard_normal(g, content.mu, content.logvar);
        let kl_style = kl_to_standard_normal(g, style.mu, style.logvar);
        let latent = g.concat(&[content.sample, style.sample]);
        let reconstruction = self.reconstructor.reconstruct(g, store, &self.embedding, latent, &batch.proto_headline)?;
        let bow = self.bow.loss(g, store, latent, &batch.proto_headline);

        let (style_classifier, style_classifier_acc) =
            contrastive_loss(g, store, &self.style.classifier, style.sample, attractive, unattractive);
        let (content_classifier, content_classifier_acc) =
            contrastive_loss(g, store, &self.content.classifier, content.sample, proto_doc, similar_doc);

        let polish = self.polisher.polish(g, store, &doc, content.sample, self.config.hops);
        let width = self.config.vocab + batch.max_oovs();
        let src = self.source(&doc, polish.output(), &batch.doc_extended, width, style.sample);
        let init = self.generator.init(g, store, doc.pooled);
        let (inputs, _) = teacher_forcing(&batch.target);
        let (_, targets) = teacher_forcing(&batch.target_extended);
        let steps = self.generator.teacher_forced(g, store, &self.embedding, init, &inputs, &src)?;
        let p_final: Vec<NodeId> = steps.iter().map(|s| s.p_final).collect();
        let (seq, clamped_targets) = sequence_loss(g, &p_final, &targets);

        Ok(BatchForward {
            doc,
            proto_doc,
            similar_doc,
            random_doc,
            proto_headline,
            attractive,
            unattractive,
            content,
            style,
            kl_content,
            kl_style,
            reconstruction,
            bow,
            style_classifier,
            style_classifier_acc,
            content_classifier,
            content_classifier_acc,
            polish,
            steps,
            seq,
            clamped_targets,
        })
    }

    /// Discriminator losses (`L_S^d`, `L_C^d`) and generator adversary losses
    /// (`L_S^g`, `L_C^g`) on the given latent / representation nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn adversarial(
        &self,
        g: &mut Graph,
        style: NodeId,
        content: NodeId,
        proto_doc: NodeId,
        random_doc: NodeId,
        attractive: NodeId,
        unattractive: NodeId,
    ) -> AdversarialTerms {
        let store = &self.store;
        let (style_discriminator, style_discriminator_acc) =
            contrastive_loss(g, store, &self.style.discriminator, style, proto_doc, random_doc);
        let (content_discriminator, content_discriminator_acc) =
            contrastive_loss(g, store, &self.content.discriminator, content, attractive, unattractive);
        let style_adversary = adversary_loss(g, store, &self.style.discriminator, style, proto_doc);
        let content_adversary = adversary_loss(g, store, &self.content.discriminator, content, attractive);
        AdversarialTerms {
            style_discriminator,
            content_discriminator,
            style_adversary,
            content_adversary,
            style_discriminator_acc,
            content_discriminator_acc,
        }
    }

    /// Convenience wrapper over [`Dahg::adversarial`] for a forward pass.
    pub fn adversarial_for(&self, g: &mut Graph, f: &BatchForward) -> AdversarialTerms {
        self.adversarial(g, f.style.sample, f.content.sample, f.proto_doc, f.random_doc, f.attractive, f.unattractive)
    }

    /// Posterior means `(mu_c, mu_s)` of a single headline.
    pub fn latent_means(&self, vocab: &Vocabulary, headline: &[String], limits: Limits) -> Result<(Vec<f64>, Vec<f64>)> {
        let ids: Vec<usize> = headline.iter().map(|t| vocab.id_or_unk(t)).collect();
        let padded = PaddedIds::from_rows(&[ids], limits.proto);
        let mut g = Graph::new();
        let (_, c, s) = self.encode_prototype::<rand_chacha::ChaCha8Rng>(&mut g, &padded, &mut Mode::Eval)?;
        Ok((g.value(c.mu).data().to_vec(), g.value(s.mu).data().to_vec()))
    }

    /// Generates a headline for `document` with the prototype chosen by
    /// `prototype`.
    pub fn generate_with_prototype(
        &self,
        vocab: &Vocabulary,
        document: &[String],
        prototype_headline: &[String],
        limits: Limits,
        beam: BeamConfig,
    ) -> Result<(Vec<String>, f64)> {
        let kept = &document[..document.len().min(limits.doc)];
        let enc = encode_extended(kept, vocab);
        let doc_ids = PaddedIds::from_rows(std::slice::from_ref(&enc.ids), kept.len());
        let proto_ids: Vec<usize> = prototype_headline.iter().map(|t| vocab.id_or_unk(t)).collect();
        let proto = PaddedIds::from_rows(&[proto_ids], limits.proto);

        let mut g = Graph::new();
        let store = &self.store;
        let doc = self.doc_encoder.encode(&mut g, store, &self.embedding, &doc_ids)?;
        let (_, content, style) = self.encode_prototype::<rand_chacha::ChaCha8Rng>(&mut g, &proto, &mut Mode::Eval)?;
        let polish = self.polisher.polish(&mut g, store, &doc, content.mu, self.config.hops);
        let scorer = NeuralScorer {
            generator: &self.generator,
            embedding: &self.embedding,
            store,
            doc: g.value(doc.states).clone(),
            polished: g.value(polish.output()).clone(),
            pooled: g.value(doc.pooled).clone(),
            style: g.value(style.mu).clone(),
            extended_ids: enc.extended_ids.clone(),
            width: self.config.vocab + enc.oovs.len(),
        };
        let best = beam_search(&scorer, beam)?;
        let ids: Vec<usize> = best.output().iter().copied().filter(|&t| t != STOP).collect();
        Ok((decode_extended(&ids, vocab, &enc.oovs), best.score()))
    }

    /// Retrieves a prototype from `index` (document-only query, excluding
    /// `id`) and generates a headline.
    pub fn generate(
        &self,
        vocab: &Vocabulary,
        index: &TfIdfIndex,
        id: &str,
        document: &[String],
        limits: Limits,
        beam: BeamConfig,
    ) -> Result<Generated> {
        let proto = index.retrieve_prototype_for_document(id, document)?;
        let (tokens, score) = self.generate_with_prototype(vocab, document, &proto.headline, limits, beam)?;
        Ok(Generated { tokens, prototype_id: proto.id.clone(), score })
    }
}
