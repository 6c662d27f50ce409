use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dahg::corpus::{read_jsonl, tokenize, Vocabulary, ATTRACTIVE_COMMENTS};
use dahg::evaluation::{evaluate, lead_rows, Report};
use dahg::generator::BeamConfig;
use dahg::retrieval::TfIdfIndex;
use dahg::training::{train_to_dir, TrainConfig, Trainer, TrainingSet};
use dahg::error::at;
use dahg::{Error, Result};

#[derive(Parser)]
#[command(name = "dahg", version, about = "Attractive headline generation with disentangled style and content latents")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the TF-IDF prototype index over a JSONL training corpus.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) a model; writes checkpoints, index and metrics.csv.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat key=value file; flags of the same name override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Decode headlines for JSONL documents; prints JSONL {id, headline, prototype_id}.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model (or dumped predictions) against reference headlines.
    Evaluate {
        /// Checkpoint file or run directory; omit when scoring --predictions.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// JSONL {id, headline} to score instead of decoding.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Dump posterior means of the content and style latents per headline as CSV.
    InspectLatent {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    beam: BeamArgs,
}

#[derive(Args)]
struct BeamArgs {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl BeamArgs {
    fn resolve(&self, cfg: &TrainConfig) -> Result<BeamConfig> {
        let b = BeamConfig {
            beam: self.beam.unwrap_or(cfg.beam),
            min_len: self.min_len.unwrap_or(cfg.min_len),
            max_len: self.max_len.unwrap_or(cfg.max_len),
        };
        if b.beam == 0 || b.min_len > b.max_len {
            return Err(Error::Config("beam must be positive and min-len at most max-len".into()));
        }
        Ok(b)
    }
}

/// One `--<key> <value>` flag per configuration key.
struct Overrides(Vec<(String, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let pairs = TrainConfig::KEYS
            .iter()
            .filter_map(|k| m.get_one::<String>(k).map(|v| ((*k).to_owned(), v.clone())))
            .collect();
        Ok(Self(pairs))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        TrainConfig::KEYS.iter().fold(cmd, |cmd, k| {
            cmd.arg(clap::Arg::new(*k).long(*k).value_name("VALUE").help_heading("Configuration overrides"))
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

/// Input lines need an id and a document; a headline is optional.
#[derive(Deserialize)]
struct DocRecord {
    id: String,
    document: String,
    #[serde(default)]
    headline: Option<String>,
    #[serde(default)]
    comment_count: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    id: String,
    headline: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prototype_id: Option<String>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(at(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn train(corpus: &Path, out: &Path, config: Option<&Path>, resume: bool, overrides: &Overrides) -> Result<()> {
    let pairs = read_jsonl(corpus)?;
    let mut trainer = if resume {
        let mut t = Trainer::load_checkpoint(out)?;
        // only the step budget and logging cadence may change on resume
        for (k, v) in &overrides.0 {
            match k.as_str() {
                "steps" | "log-every" | "checkpoint-every" => t.config.set(k, v)?,
                _ => return Err(Error::Config(format!("--{k} cannot change when resuming"))),
            }
        }
        t
    } else {
        let mut cfg = match config {
            Some(p) => TrainConfig::parse(&std::fs::read_to_string(p).map_err(at(p))?)?,
            None => TrainConfig::default(),
        };
        for (k, v) in &overrides.0 {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        let vocab = Vocabulary::build(&pairs, cfg.vocab_cap)?;
        Trainer::new(cfg, vocab)?
    };
    let data = TrainingSet::with_vocab(&pairs, trainer.vocab.clone())?;
    std::fs::create_dir_all(out)?;
    data.index.save(out.join("index.json"))?;
    std::fs::write(out.join("config.cfg"), trainer.config.to_text())?;
    let remaining = trainer.config.steps.saturating_sub(trainer.step);
    let trace = train_to_dir(&mut trainer, &data, remaining, out)?;
    if let Some(last) = trace.last() {
        eprintln!("step {} loss_g {:.6} loss_d {:.6} seq {:.6}", trainer.step, last.loss_g, last.loss_d, last.seq);
    }
    Ok(())
}

fn generate(args: &ModelArgs, out: Option<&Path>) -> Result<()> {
    let trainer = Trainer::load_checkpoint(&args.model)?;
    let index = TfIdfIndex::load(&args.index)?;
    let beam = args.beam.resolve(&trainer.config)?;
    let limits = trainer.config.limits();
    let mut w = output(out)?;
    for rec in read_lines::<DocRecord>(&args.input)? {
        let doc = tokenize(&rec.document)?;
        let g = trainer.model.generate(&trainer.vocab, &index, &rec.id, &doc, limits, beam)?;
        let p = Prediction { id: rec.id, headline: g.tokens.join(" "), prototype_id: Some(g.prototype_id) };
        writeln!(w, "{}", serde_json::to_string(&p)?)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    model: Option<&Path>,
    index: Option<&Path>,
    input: &Path,
    predictions: Option<&Path>,
    beam: &BeamArgs,
    out_csv: &Path,
    out_json: &Path,
) -> Result<()> {
    let test = read_jsonl(input)?;
    let report = match (predictions, model) {
        (Some(preds), _) => {
            let preds: std::collections::HashMap<String, String> =
                read_lines::<Prediction>(preds)?.into_iter().map(|p| (p.id, p.headline)).collect();
            let mut rows = Vec::with_capacity(test.len());
            for p in &test {
                let h = preds.get(&p.id).ok_or_else(|| Error::Config(format!("no prediction for id {}", p.id)))?;
                rows.push((p.id.clone(), h.split_whitespace().map(str::to_owned).collect(), p.headline.clone()));
            }
            let mut r = Report::default();
            r.add_system("predictions", &rows);
            r.add_system("lead", &lead_rows(&test, TrainConfig::default().headline_len));
            r
        }
        (None, Some(model)) => {
            let index = index.ok_or_else(|| Error::Config("--index is required with --model".into()))?;
            let trainer = Trainer::load_checkpoint(model)?;
            let index = TfIdfIndex::load(index)?;
            let beam = beam.resolve(&trainer.config)?;
            evaluate(&trainer.model, &trainer.vocab, &index, &test, trainer.config.limits(), beam)?
        }
        (None, None) => return Err(Error::Config("pass --model or --predictions".into())),
    };
    report.write(out_csv, out_json)?;
    for s in &report.summaries {
        eprintln!(
            "{}: R-1 {:.4} R-2 {:.4} R-L {:.4} BLEU {:.4}",
            s.system, s.rouge_1, s.rouge_2, s.rouge_l, s.bleu
        );
    }
    Ok(())
}

fn inspect_latent(model: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let trainer = Trainer::load_checkpoint(model)?;
    let limits = trainer.config.limits();
    let latent = trainer.config.latent;
    let mut w = csv::Writer::from_writer(output(out)?);
    let mut header = vec!["id".to_owned(), "attractive".to_owned()];
    header.extend((0..latent).map(|i| format!("mu_c_{i}")));
    header.extend((0..latent).map(|i| format!("mu_s_{i}")));
    w.write_record(&header)?;
    for rec in read_lines::<DocRecord>(input)? {
        let headline = rec.headline.ok_or_else(|| Error::Config(format!("record {} has no headline", rec.id)))?;
        let (mu_c, mu_s) = trainer.model.latent_means(&trainer.vocab, &tokenize(&headline)?, limits)?;
        let attractive = rec.comment_count.map_or(String::new(), |c| (c > ATTRACTIVE_COMMENTS).to_string());
        let mut row = vec![rec.id, attractive];
        row.extend(mu_c.iter().chain(&mu_s).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::BuildIndex { corpus, out } => {
            let index = TfIdfIndex::build(&read_jsonl(&corpus)?)?;
            index.save(&out)?;
            eprintln!("indexed {} pairs", index.len());
            Ok(())
        }
        Cmd::Train { corpus, out, config, resume, overrides } => {
            train(&corpus, &out, config.as_deref(), resume, &overrides)
        }
        Cmd::Generate { model, out } => generate(&model, out.as_deref()),
        Cmd::Evaluate { model, index, input, predictions, beam, out_csv, out_json } => run_evaluate(
            model.as_deref(),
            index.as_deref(),
            &input,
            predictions.as_deref(),
            &beam,
            &out_csv,
            &out_json,
        ),
        Cmd::InspectLatent { model, input, out } => inspect_latent(&model, &input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dahg: {e}");
            ExitCode::FAILURE
        }
    }
}
