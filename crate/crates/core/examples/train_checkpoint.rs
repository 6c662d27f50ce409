//! Training with checkpoints: a short run written to a directory, reloaded
//! from its `latest` pointer and resumed, then used to generate.

use dahg::synthetic::desk_fixture;
use dahg::training::{train_to_dir, TrainConfig, Trainer, TrainingSet};

pub fn main() -> dahg::error::Result<()> {
    let pairs = desk_fixture();
    let data = TrainingSet::new(&pairs, 1000)?;
    let config = TrainConfig::parse(
        "batch-size = 8\ndoc-len = 16\nemb-dim = 16\nhidden = 16\nlatent = 8\n\
         dec-hidden = 16\ndec-output = 16\ngate-hidden = 16\nrecon-hidden = 16\n\
         min-len = 3\nmax-len = 8\ncheckpoint-every = 10\n",
    )?;
    let dir = tempfile::tempdir()?;

    let mut trainer = Trainer::new(config, data.vocab.clone())?;
    let first = train_to_dir(&mut trainer, &data, 20, dir.path())?;
    println!("step {}: L_G {:.3}", trainer.step, first.last().expect("ran").loss_g);

    let mut resumed = Trainer::load_checkpoint(dir.path())?;
    assert_eq!(resumed.step, 20);
    let more = train_to_dir(&mut resumed, &data, 10, dir.path())?;
    println!("resumed to step {}: L_G {:.3}", resumed.step, more.last().expect("ran").loss_g);

    let mut files: Vec<String> =
        std::fs::read_dir(dir.path())?.map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned())).collect::<Result<_, _>>()?;
    files.sort();
    println!("run directory: {}", files.join(", "));

    let pair = &pairs[0];
    let out = resumed.model.generate(
        &resumed.vocab,
        &data.index,
        &pair.id,
        &pair.document,
        resumed.config.limits(),
        resumed.config.beam_config(),
    )?;
    println!("{} via prototype {}: {}", pair.id, out.prototype_id, out.tokens.join(" "));
    Ok(())
}
