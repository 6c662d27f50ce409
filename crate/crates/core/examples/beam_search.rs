//! Beam search against exhaustive enumeration on a small lookup-table
//! decoder, plus the effect of the minimum-length constraint.

use dahg::corpus::{PAD, START, STOP};
use dahg::error::Result;
use dahg::generator::{beam_search, beam_search_ranked, BeamConfig, StepScorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 6;

/// Log-probabilities depend on the step index only.
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

fn random_table(rng: &mut ChaCha8Rng, steps: usize) -> Table {
    Table(
        (0..steps)
            .map(|_| {
                let raw: Vec<f64> = (0..VOCAB).map(|w| if w == PAD || w == START { 0.0 } else { rng.gen::<f64>() }).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| (v / sum).ln()).collect()
            })
            .collect(),
    )
}

pub fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = random_table(&mut rng, 4);
    let cfg = BeamConfig { beam: 4, min_len: 0, max_len: 4 };
    let best = beam_search(&table, cfg)?;
    let exhaustive = beam_search(&table, BeamConfig { beam: 10_000, ..cfg })?;
    println!("beam 4:     {:?} score {:.4}", best.tokens, best.score());
    println!("exhaustive: {:?} score {:.4}", exhaustive.tokens, exhaustive.score());

    for h in beam_search_ranked(&table, cfg)?.iter().take(3) {
        println!("  ranked {:?} {:.4}", h.tokens, h.score());
    }

    let long = beam_search(&table, BeamConfig { beam: 4, min_len: 3, max_len: 6 })?;
    assert!(long.output().len() >= 3);
    println!("with min_len 3: {:?} (STOP = {STOP})", long.tokens);
    Ok(())
}
