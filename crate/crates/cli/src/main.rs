mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vhda::corpus::{build_ontology, generate_toy_corpus, load_corpus, CorpusFormat, DialogCorpus, ToySpec};
use vhda::evaluation::{evaluate_gda, train_tracker};
use vhda::sampler::{augment, interpolate, sample_synthetic};
use vhda::trainer::{load_model, Trainer};

use config::RunConfig;
use manifest::{hash_path, unix_now, OutputDir, RunManifest};

#[derive(Parser, Debug)]
#[command(
    name = "vhda",
    version,
    about = "Hierarchical dialog autoencoder: training, sampling and augmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task-oriented corpus.
    GenToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        dialogs: usize,
        #[arg(long, default_value_t = 3)]
        slots: usize,
        #[arg(long, default_value_t = 4)]
        values: usize,
        #[arg(long, default_value_t = 12)]
        max_turns: usize,
        /// Also write train.jsonl/test.jsonl with this fraction in train.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Train a model; writes a checkpoint directory and a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw posterior samples anchored on corpus dialogs.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Number of samples (defaults to the corpus size).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Append synthetic dialogs to a corpus.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
    },
    /// Decode dialogs between the posterior means of two anchors.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Anchor ids (default: the first two dialogs).
        #[arg(long)]
        first: Option<String>,
        #[arg(long)]
        second: Option<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Train a state tracker and score it on a test corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also report teacher-forced reconstruction of the test corpus.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare trackers trained with and without synthetic data.
    GdaEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Train while recording the KL / mutual-information decomposition of the
    /// conversation latent at every step.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// No MI term, no dropout and no KL annealing.
        #[arg(long)]
        collapse: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy { .. } => "gen-toy",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Augment { .. } => "augment",
            Command::Interpolate { .. } => "interpolate",
            Command::Evaluate { .. } => "evaluate",
            Command::GdaEval { .. } => "gda-eval",
            Command::Diagnose { .. } => "diagnose",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenToy { common, .. }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Augment { common, .. }
            | Command::Interpolate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::GdaEval { common, .. }
            | Command::Diagnose { common, .. } => common,
        }
    }
}

struct Run {
    config: RunConfig,
    out: OutputDir,
    manifest: RunManifest,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.extend(hash_path(path)?);
        Ok(())
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn corpus(&mut self, path: &Path) -> Result<DialogCorpus> {
        self.input(path)?;
        let corpus = load_corpus(path, CorpusFormat::from_path(path))?;
        corpus.validate()?;
        Ok(corpus)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    let common = command.common();
    let mut config = RunConfig::load(common.preset.name(), common.config.as_deref(), std::env::vars())?;
    config.train.seed = common.seed;
    if let Command::Train { steps: Some(s), .. } | Command::Diagnose { steps: Some(s), .. } = &command {
        config.train.steps = *s;
    }
    if let Command::Diagnose { collapse: true, .. } = &command {
        config.train.mi_weight = 0.0;
        config.train.dropout_base = 0.0;
        config.train.anneal_horizon = None;
    }
    config.train.validate()?;
    if common.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let mut run = Run {
        manifest: RunManifest {
            command: command.name().to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: common.config.as_ref().map(|p| p.display().to_string()),
            config_hash: config.hash(),
            seed: common.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        },
        out: OutputDir::open(&common.out)?,
        config,
    };
    if let Some(path) = &common.config {
        run.input(path)?;
    }
    execute(&command, &mut run)?;
    let Run { out, manifest, .. } = run;
    out.commit(manifest)?;
    Ok(())
}

fn execute(command: &Command, run: &mut Run) -> Result<()> {
    match command {
        Command::GenToy {
            common,
            dialogs,
            slots,
            values,
            max_turns,
            train_fraction,
        } => {
            let corpus = generate_toy_corpus(&ToySpec {
                n_dialogs: *dialogs,
                n_slots: *slots,
                n_values: *values,
                max_turns: *max_turns,
                seed: common.seed,
            })?;
            corpus.save(&run.out.path("corpus.jsonl"), CorpusFormat::Jsonl)?;
            if let Some(f) = train_fraction {
                if !(*f > 0.0 && *f < 1.0) {
                    bail!("--train-fraction must lie strictly between 0 and 1");
                }
                let (train, test) = corpus.split(*f, common.seed);
                if test.is_empty() {
                    bail!("--train-fraction leaves no test dialogs");
                }
                train.save(&run.out.path("train.jsonl"), CorpusFormat::Jsonl)?;
                test.save(&run.out.path("test.jsonl"), CorpusFormat::Jsonl)?;
            }
            println!("wrote {} dialogs to {}", corpus.len(), common.out.display());
        }
        Command::Train { corpus, resume, .. } => {
            let corpus = run.corpus(corpus)?;
            let ckpt = run.out.path("checkpoint");
            let mut trainer = if *resume {
                let mut t = Trainer::resume(&ckpt, &corpus, None)?;
                // only the step budget may change on resume
                t.config.steps = run.config.train.steps;
                t
            } else {
                Trainer::new(run.config.train.clone(), &corpus)?
            };
            trainer.log_to(&run.out.path("train_log.jsonl"))?;
            trainer.checkpoint_to(&ckpt);
            let total = trainer.config.steps;
            let records = trainer.train(|r| {
                if r.step % 100 == 0 || r.step + 1 == total {
                    eprintln!(
                        "step {:>6}  total {:>10.4}  recon {:>10.4}  kl {:>8.4}  mi {:>7.4}",
                        r.step,
                        r.loss.total,
                        r.loss.recon_total(),
                        r.loss.kl_total,
                        r.loss.mi_estimate
                    );
                }
            })?;
            let summary = vhda::trainer::summarize(&records);
            run.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
        }
        Command::Sample {
            common,
            checkpoint,
            corpus,
            n,
        } => {
            run.input(checkpoint)?;
            let (model, _) = load_model(checkpoint)?;
            let corpus = run.corpus(corpus)?;
            let sampler = run.config.sampler_for(&corpus);
            let count = n.unwrap_or(corpus.len());
            let results = sample_synthetic(&corpus, &model, count, common.seed, &sampler, common.workers)?;
            let (dialogs, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            DialogCorpus {
                dialogs,
                goal_consistent: false,
            }
            .save(&run.out.path("samples.jsonl"), CorpusFormat::Jsonl)?;
            run.write("samples_report.json", serde_json::to_string_pretty(&records)?)?;
            println!("wrote {count} samples");
        }
        Command::Augment {
            common,
            checkpoint,
            corpus,
            ratio,
        } => {
            run.input(checkpoint)?;
            let (model, _) = load_model(checkpoint)?;
            let corpus = run.corpus(corpus)?;
            let sampler = run.config.sampler_for(&corpus);
            let (augmented, report) = augment(&corpus, &model, *ratio, common.seed, &sampler, common.workers)?;
            augmented.save(&run.out.path("augmented.jsonl"), CorpusFormat::Jsonl)?;
            run.write("report.json", serde_json::to_string_pretty(&report)?)?;
            println!(
                "{} original + {} synthetic, novelty {:.3}, validity {:.3}",
                corpus.len(),
                report.samples.len(),
                report.novelty_rate,
                report.validity_rate
            );
        }
        Command::Interpolate {
            common,
            checkpoint,
            corpus,
            first,
            second,
            n,
        } => {
            run.input(checkpoint)?;
            let (model, _) = load_model(checkpoint)?;
            let corpus = run.corpus(corpus)?;
            let pick = |id: &Option<String>, default: usize| match id {
                Some(id) => corpus
                    .dialogs
                    .iter()
                    .find(|d| &d.id == id)
                    .ok_or_else(|| anyhow!("no dialog with id {id:?}")),
                None => corpus
                    .dialogs
                    .get(default)
                    .ok_or_else(|| anyhow!("corpus has fewer than {} dialogs", default + 1)),
            };
            let (a, b) = (pick(first, 0)?, pick(second, 1)?);
            let sampler = run.config.sampler_for(&corpus);
            let points = interpolate(&model, a, b, *n, &sampler, common.seed)?;
            let truncated: Vec<bool> = points.iter().map(|g| g.truncated).collect();
            DialogCorpus {
                dialogs: points.into_iter().map(|g| g.dialog).collect(),
                goal_consistent: false,
            }
            .save(&run.out.path("interpolation.jsonl"), CorpusFormat::Jsonl)?;
            run.write(
                "interpolation_report.json",
                serde_json::to_string_pretty(&json!({"first": a.id, "second": b.id, "truncated": truncated}))?,
            )?;
        }
        Command::Evaluate {
            common,
            train,
            test,
            checkpoint,
        } => {
            let train = run.corpus(train)?;
            let test = run.corpus(test)?;
            let ontology = build_ontology(&union(&train, &test));
            let tracker = train_tracker(&train, &ontology, &run.config.tracker, common.seed)?;
            let metrics = tracker.evaluate(&test)?;
            let mut report = json!({ "tracker": metrics });
            if let Some(dir) = checkpoint {
                run.input(dir)?;
                let (model, _) = load_model(dir)?;
                let refs: Vec<_> = test.dialogs.iter().collect();
                report["reconstruction"] = serde_json::to_value(model.reconstruct(&refs)?)?;
            }
            let text = serde_json::to_string_pretty(&report)?;
            run.write("metrics.json", &text)?;
            println!("{text}");
        }
        Command::GdaEval {
            common,
            checkpoint,
            train,
            test,
        } => {
            run.input(checkpoint)?;
            let (model, _) = load_model(checkpoint)?;
            let train = run.corpus(train)?;
            let test = run.corpus(test)?;
            let ontology = build_ontology(&union(&train, &test));
            let gda = run
                .config
                .gda(run.config.sampler_for(&train), common.seed, common.workers);
            let report = evaluate_gda(&train, &test, &ontology, &model, &gda, |msg| eprintln!("{msg}"))?;
            let table = report.to_tsv();
            run.write("report.json", serde_json::to_string_pretty(&report)?)?;
            run.write("table.tsv", &table)?;
            print!("{table}");
        }
        Command::Diagnose { corpus, .. } => {
            let corpus = run.corpus(corpus)?;
            let mut trainer = Trainer::new(run.config.train.clone(), &corpus)?;
            let records = trainer.train(|_| {})?;
            let mut csv = String::from(
                "step,anneal_weight,kl_c,aggregate_kl,mutual_information,mean_kl,residual,mi_estimate,recon,total\n",
            );
            for r in &records {
                let p = &r.global_kl_probe;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.step,
                    r.loss.anneal_weight,
                    r.loss.kl_per_level.get("c").copied().unwrap_or(f64::NAN),
                    p.aggregate_kl,
                    p.mutual_information,
                    p.mean_kl,
                    p.residual,
                    r.loss.mi_estimate,
                    r.loss.recon_total(),
                    r.loss.total
                ));
            }
            run.write("diagnostics.csv", csv)?;
            if let Some(last) = records.last() {
                println!(
                    "final step {}: kl_c {:.4}, aggregate kl {:.4}, mi {:.4}",
                    last.step,
                    last.loss.kl_per_level.get("c").copied().unwrap_or(f64::NAN),
                    last.global_kl_probe.aggregate_kl,
                    last.global_kl_probe.mutual_information
                );
            }
        }
    }
    Ok(())
}

fn union(a: &DialogCorpus, b: &DialogCorpus) -> DialogCorpus {
    DialogCorpus {
        dialogs: a.dialogs.iter().chain(&b.dialogs).cloned().collect(),
        goal_consistent: a.goal_consistent && b.goal_consistent,
    }
}
