//! Multi-hop polishing: how gates spread over document positions on each
//! hop, with softmax and sigmoid gating.

use dahg::autograd::Graph;
use dahg::corpus::PaddedIds;
use dahg::model::{Dahg, ModelConfig};
use dahg::polish::GateKind;
use dahg::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn main() -> dahg::error::Result<()> {
    for kind in [GateKind::Softmax, GateKind::Sigmoid] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut config = ModelConfig::desk(12);
        config.gate_kind = kind;
        config.hops = 3;
        config.init_std = 0.3;
        let model = Dahg::new(config, &mut rng);

        // two documents, the second padded after four tokens
        let docs = PaddedIds::from_rows(&[vec![4, 5, 6, 7, 8, 9], vec![10, 11, 5, 4]], 6);
        let mut g = Graph::new();
        let enc = model.doc_encoder.encode(&mut g, &model.store, &model.embedding, &docs)?;
        let content = g.constant(Tensor::randn(2, model.config.latent, 1.0, &mut rng));
        let state = model.polisher.polish(&mut g, &model.store, &enc, content, model.config.hops);

        println!("{kind:?} gating");
        for (hop, &gates) in state.gates.iter().enumerate() {
            for row in 0..2 {
                let gs: Vec<String> = g.value(gates).row(row).iter().map(|v| format!("{v:.3}")).collect();
                println!("  hop {} doc {}: [{}]", hop + 1, row, gs.join(", "));
            }
        }
    }
    Ok(())
}
