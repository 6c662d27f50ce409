mod common;

use common::tiny_model_config;
use dahg::autograd::Graph;
use dahg::generator::{DecoderStep, GateOverrides, Source};
use dahg::model::Dahg;
use dahg::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 9;

/// Two rows over three source positions; row 1 is padded after one token.
/// Position 2 of row 0 holds the out-of-vocabulary id `VOCAB`.
fn step(forced: GateOverrides, len: usize) -> (Graph, Dahg, Source, DecoderStep) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Dahg::new(tiny_model_config(VOCAB), &mut rng);
    let dim = 2 * model.config.hidden;
    let mut g = Graph::new();
    let doc = g.constant(Tensor::randn(2 * len, dim, 1.0, &mut rng));
    let polished = g.constant(Tensor::randn(2 * len, dim, 1.0, &mut rng));
    let style = g.constant(Tensor::randn(2, model.config.latent, 1.0, &mut rng));
    let mut mask = vec![true; 2 * len];
    let mut extended_ids: Vec<usize> = (0..2 * len).map(|i| 4 + i % 4).collect();
    if len == 3 {
        mask[4] = false;
        mask[5] = false;
        extended_ids[2] = VOCAB;
    }
    let src = Source { doc, polished, mask, len, extended_ids, width: VOCAB + 1, style };
    let pooled = g.constant(Tensor::randn(2, dim, 1.0, &mut rng));
    let init = model.generator.init(&mut g, &model.store, pooled);
    let s = model.generator.step(&mut g, &model.store, &model.embedding, &init, &[2, 5], &src, forced).unwrap();
    (g, model, src, s)
}

#[test]
fn editing_gate_extremes_select_one_context() {
    let (g, _, _, s) = step(GateOverrides { edit: Some(1.0), ..Default::default() }, 3);
    assert_eq!(g.value(s.state.context), g.value(s.ctx_doc));
    let (g, _, _, s) = step(GateOverrides { edit: Some(0.0), ..Default::default() }, 3);
    assert_eq!(g.value(s.state.context), g.value(s.ctx_polished));
}

#[test]
fn guidance_gate_extremes() {
    let (g, _, _, s) = step(GateOverrides { guide: Some(1.0), ..Default::default() }, 3);
    assert_eq!(g.value(s.guided), g.value(s.out));
    let (mut g, model, src, s) = step(GateOverrides { guide: Some(0.0), ..Default::default() }, 3);
    let style = model.generator.style_proj.forward(&mut g, &model.store, src.style);
    assert_eq!(g.value(s.guided), g.value(style));
}

#[test]
fn vocabulary_distribution_is_the_softmax_of_the_output_layer() {
    let (g, model, _, s) = step(GateOverrides::default(), 3);
    let w = model.store.value(model.generator.vocab_out.weight);
    let b = model.store.value(model.generator.vocab_out.bias);
    let guided = g.value(s.guided);
    for r in 0..2 {
        let logits: Vec<f64> =
            (0..VOCAB).map(|v| b.get(0, v) + (0..guided.cols()).map(|k| guided.get(r, k) * w.get(k, v)).sum::<f64>()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (v, l) in logits.iter().enumerate() {
            assert!((g.value(s.p_vocab).get(r, v) - l.exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn final_distribution_sums_to_one_and_respects_padding() {
    let (g, _, _, s) = step(GateOverrides::default(), 3);
    for r in 0..2 {
        let sum: f64 = g.value(s.p_final).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    assert_eq!(&g.value(s.attn_doc).row(1)[1..], &[0.0, 0.0]);
    assert_eq!(&g.value(s.attn_polished).row(1)[1..], &[0.0, 0.0]);
}

#[test]
fn copy_gate_extremes() {
    let (g, _, _, s) = step(GateOverrides { copy: Some(1.0), ..Default::default() }, 3);
    let p = g.value(s.p_final);
    for r in 0..2 {
        assert_eq!(&p.row(r)[..VOCAB], g.value(s.p_vocab).row(r));
        assert_eq!(p.get(r, VOCAB), 0.0);
    }
    let (g, _, src, s) = step(GateOverrides { copy: Some(0.0), ..Default::default() }, 3);
    let p = g.value(s.p_final);
    let attn = g.value(s.attn_doc);
    for r in 0..2 {
        let mut expected = vec![0.0; VOCAB + 1];
        for t in 0..3 {
            expected[src.extended_ids[r * 3 + t]] += attn.get(r, t);
        }
        for (a, e) in p.row(r).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }
    // the OOV column is reachable only by copying
    assert!(p.get(0, VOCAB) > 0.0);
}

#[test]
fn single_position_attention_is_a_point_mass() {
    let (g, _, src, s) = step(GateOverrides::default(), 1);
    for r in 0..2 {
        assert_eq!(g.value(s.attn_doc).row(r), &[1.0]);
        assert_eq!(g.value(s.ctx_doc).row(r), g.value(src.doc).row(r));
        assert_eq!(g.value(s.ctx_polished).row(r), g.value(src.polished).row(r));
    }
}
