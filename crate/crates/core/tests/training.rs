mod common;

use common::{desk_config, small_config, total_loss};
use dahg::autograd::Graph;
use dahg::disentangle::reparameterize;
use dahg::error::Error;
use dahg::synthetic::{desk_fixture, memorization_fixture};
use dahg::tensor::Tensor;
use dahg::training::{kl_anneal, Trainer, TrainingSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generator_loss_decomposes_into_logged_terms() {
    let data = TrainingSet::new(&desk_fixture(), 1000).unwrap();
    let mut t = Trainer::new(small_config(), data.vocab.clone()).unwrap();
    for m in t.train(&data, 4, |_, _| Ok(())).unwrap() {
        let constraints = m.style_classifier + m.content_classifier + m.style_adversary + m.content_adversary;
        let expected = m.kl_weight * (m.kl_content + m.kl_style) + m.reconstruction + m.bow + constraints + m.seq;
        assert!((m.loss_g - expected).abs() < 1e-9, "{} vs {}", m.loss_g, expected);
        assert!((m.loss_d - m.style_discriminator - m.content_discriminator).abs() < 1e-12);
        assert_eq!(m.kl_weight, kl_anneal(m.step, t.config.kl_anneal_batches));
    }
}

#[test]
fn zero_constraint_weight_leaves_vae_and_sequence_terms() {
    let data = TrainingSet::new(&desk_fixture(), 1000).unwrap();
    let mut cfg = small_config();
    cfg.constraint_weight = 0.0;
    let mut t = Trainer::new(cfg, data.vocab.clone()).unwrap();
    let m = t.train(&data, 1, |_, _| Ok(())).unwrap().remove(0);
    let expected = m.kl_weight * (m.kl_content + m.kl_style) + m.reconstruction + m.bow + m.seq;
    assert!((m.loss_g - expected).abs() < 1e-9);
}

#[test]
fn non_finite_parameter_is_reported() {
    let data = TrainingSet::new(&desk_fixture(), 1000).unwrap();
    let mut t = Trainer::new(small_config(), data.vocab.clone()).unwrap();
    let id = t.model.store.by_name("dec.vocab.weight").or_else(|| t.model.store.ids().last()).unwrap();
    t.model.store.value_mut(id).data_mut()[0] = f64::NAN;
    let batch = t.next_batch(&data).unwrap();
    match t.train_step(&batch) {
        Err(Error::NonFiniteLoss { step: 0, .. }) => {}
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|m| m.loss_g)),
    }
}

#[test]
fn same_seed_same_trace_different_seed_different_trace() {
    let data = TrainingSet::new(&desk_fixture(), 1000).unwrap();
    let run = |seed| {
        let mut cfg = small_config();
        cfg.seed = seed;
        let mut t = Trainer::new(cfg, data.vocab.clone()).unwrap();
        t.train(&data, 3, |_, _| Ok(())).unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn reconstruction_overfits_a_tiny_set() {
    let pairs = memorization_fixture();
    let data = TrainingSet::new(&pairs, 1000).unwrap();
    let mut cfg = desk_config();
    cfg.lr = 5e-3;
    cfg.keep_prob = 1.0;
    cfg.batch_size = 10;
    let mut t = Trainer::new(cfg, data.vocab.clone()).unwrap();
    let trace = t.train(&data, 300, |_, _| Ok(())).unwrap();
    let (first, last) = (&trace[0], trace.last().unwrap());
    assert!(last.reconstruction < 0.1 * first.reconstruction, "{} -> {}", first.reconstruction, last.reconstruction);
    assert!(last.seq < 0.1 * first.seq, "{} -> {}", first.seq, last.seq);
}

#[test]
fn fixed_noise_loss_is_a_pure_function_of_parameters() {
    let data = TrainingSet::new(&desk_fixture(), 1000).unwrap();
    let mut t = Trainer::new(small_config(), data.vocab.clone()).unwrap();
    let batch = t.next_batch(&data).unwrap();
    let (g1, a) = total_loss(&t.model, &batch, &t.config, 9);
    let (g2, b) = total_loss(&t.model, &batch, &t.config, 9);
    assert_eq!(g1.value(a).item().to_bits(), g2.value(b).item().to_bits());
}

#[test]
fn reparameterised_samples_have_the_posterior_moments() {
    let (mu, logvar) = (0.7, -0.6f64);
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph::new();
    let m = g.constant(Tensor::full(n, 1, mu));
    let lv = g.constant(Tensor::full(n, 1, logvar));
    let z = reparameterize(&mut g, m, lv, Tensor::randn(n, 1, 1.0, &mut rng));
    let xs = g.value(z).data();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // five standard errors
    assert!((mean - mu).abs() < 5.0 * (logvar.exp() / n as f64).sqrt());
    assert!((var - logvar.exp()).abs() < 5.0 * logvar.exp() * (2.0 / n as f64).sqrt());
}
