//! Style and content latents: the closed-form KL, reparameterised sampling,
//! and posterior means of a briefly trained model separated by a linear
//! probe.

use dahg::autograd::Graph;
use dahg::disentangle::{gaussian_kl, kl_to_standard_normal, reparameterize};
use dahg::evaluation::linear_probe;
use dahg::synthetic::{style_marker_corpus, SyntheticSpec};
use dahg::tensor::Tensor;
use dahg::training::{TrainConfig, Trainer, TrainingSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn main() -> dahg::error::Result<()> {
    println!("KL(N(0,1) || N(0,1)) = {}", gaussian_kl(&[0.0], &[0.0]));
    println!("KL(N(1,e) || N(0,1)) = {:.6}", gaussian_kl(&[1.0], &[1.0]));

    let mut g = Graph::new();
    let mu = g.constant(Tensor::from_vec(1, 2, vec![0.5, -1.0]));
    let logvar = g.constant(Tensor::from_vec(1, 2, vec![0.0, -2.0]));
    let kl = kl_to_standard_normal(&mut g, mu, logvar);
    println!("graph KL = {:.6}", g.value(kl).item());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = reparameterize(&mut g, mu, logvar, Tensor::randn(1, 2, 1.0, &mut rng));
    println!("one sample z = {:?}", g.value(z).data());

    let pairs = style_marker_corpus(SyntheticSpec { pairs: 80, ..SyntheticSpec::default() });
    let data = TrainingSet::new(&pairs, 1000)?;
    let mut config = TrainConfig::default();
    for (k, v) in [("batch-size", "16"), ("doc-len", "20"), ("emb-dim", "16"), ("hidden", "16"), ("latent", "8")] {
        config.set(k, v)?;
    }
    for k in ["dec-hidden", "dec-output", "gate-hidden", "recon-hidden"] {
        config.set(k, "16")?;
    }
    let mut trainer = Trainer::new(config, data.vocab.clone())?;
    let trace = trainer.train(&data, 40, |_, _| Ok(()))?;
    let last = trace.last().expect("trained");
    println!("after {} steps: L_G {:.3}, L_D {:.3}", trainer.step, last.loss_g, last.loss_d);

    let limits = trainer.config.limits();
    let mut style = Vec::new();
    let mut labels = Vec::new();
    for p in &pairs {
        let (_, mu_s) = trainer.model.latent_means(&trainer.vocab, &p.headline, limits)?;
        style.push(mu_s);
        labels.push(p.attractive());
    }
    let acc = linear_probe(&style, &labels, pairs.len() / 2, 300);
    println!("held-out style probe accuracy on mu_s: {acc:.3}");
    Ok(())
}
