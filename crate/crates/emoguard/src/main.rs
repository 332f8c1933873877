use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emoguard::checkpoint::{load_checkpoint, save_checkpoint};
use emoguard::config::ExperimentConfig;
use emoguard::corpus::{load_corpus, save_corpus};
use emoguard::error::{Error, Result, StageExt};
use emoguard::experiment::{
    fold_plan, membership_run, membership_split, probe_seed, run_experiment_to, run_seed, single_spec,
    standard_split,
};
use emoguard::history::write_history;
use emoguard::report::{emit_table, MetricsReport};
use emoguard_core::attack::{privacy_metric, AttackResult};
use emoguard_core::data::{generate_corpus, znorm_by_speaker, Task, UtteranceSample};
use emoguard_core::model::{Modality, Mode};
use emoguard_core::rng::derive_seed;
use emoguard_core::train::train;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "emoguard", version, about = "Adversarially debiased emotion representations on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed and the corpus seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Select {
    #[arg(long, value_enum, default_value = "acoustic")]
    modality: ModalityArg,
    #[arg(long, value_enum, default_value = "activation")]
    task: TaskArg,
    #[arg(long, value_enum, default_value = "priv")]
    mode: ModeArg,
    /// Fold rotation, 0 to 4.
    #[arg(long, default_value_t = 0)]
    rotation: usize,
    /// Corpus directory written by `gen-data`; generated from the config otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Acoustic,
    Lexical,
    Multimodal,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Activation,
    Valence,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gen,
    Priv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(Common),
    /// Train one model on one fold rotation and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Gender attack on a saved checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        rotation: usize,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train under the membership protocol and attack membership.
    Mi {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Run the configured scenario over all folds.
    Experiment(Common),
    /// Re-emit report.md and folds.csv from report.json.
    Report {
        /// Directory holding report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct AttackRecord<'a> {
    dataset: &'a str,
    modality: Modality,
    task: Task,
    mode: Mode,
    lambda: Option<f64>,
    attack: &'a AttackResult,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate().stage("config", &cfg.hash())?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn corpus_for(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<UtteranceSample>> {
    let mut corpus = match dir {
        Some(d) => load_corpus(d)?.0,
        None => generate_corpus(&cfg.generator)?,
    };
    znorm_by_speaker(&mut corpus)?;
    Ok(corpus)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn selection(select: &Select) -> (Modality, Task, Mode) {
    let modality = match select.modality {
        ModalityArg::Acoustic => Modality::Acoustic,
        ModalityArg::Lexical => Modality::Lexical,
        ModalityArg::Multimodal => Modality::Multimodal,
    };
    let task = match select.task {
        TaskArg::Activation => Task::Activation,
        TaskArg::Valence => Task::Valence,
    };
    let mode = match select.mode {
        ModeArg::Gen => Mode::Gen,
        ModeArg::Priv => Mode::Priv,
    };
    (modality, task, mode)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let hash = cfg.hash();
            let corpus = generate_corpus(&cfg.generator).stage("generate-corpus", &hash)?;
            let out = out_dir(&common, &cfg);
            save_corpus(&out, &corpus, Some(&cfg.generator)).stage("write-corpus", &hash)?;
            println!("wrote {} utterances to {}", corpus.len(), out.display());
        }
        Command::Train { common, select } => {
            let cfg = load_config(&common)?;
            let hash = cfg.hash();
            let corpus = corpus_for(&cfg, select.corpus.as_deref()).stage("corpus", &hash)?;
            let plan = fold_plan(&cfg, &corpus).stage("folds", &hash)?;
            let (modality, task, mode) = selection(&select);
            let spec = single_spec(&cfg, modality, task, mode);
            let (data, _) = standard_split(&corpus, &plan, select.rotation);
            let seed = derive_seed(run_seed(&cfg, select.rotation), &[cfg.train.seeds.first().copied().unwrap_or(0)]);
            let (model, history) = train(&spec, &data, &cfg.train, seed).stage("train", &hash)?;
            let out = out_dir(&common, &cfg);
            save_checkpoint(&model, &out.join("checkpoint")).stage("write-checkpoint", &hash)?;
            write_history(&out.join("history.jsonl"), &history).stage("write-history", &hash)?;
            println!(
                "best epoch {} of {}, checkpoint in {}",
                history.best_epoch,
                history.epochs.len(),
                out.join("checkpoint").display()
            );
        }
        Command::Attack {
            common,
            checkpoint,
            rotation,
            corpus,
        } => {
            let cfg = load_config(&common)?;
            let hash = cfg.hash();
            let model = load_checkpoint(&checkpoint).stage("load-checkpoint", &hash)?;
            let samples = corpus_for(&cfg, corpus.as_deref()).stage("corpus", &hash)?;
            let plan = fold_plan(&cfg, &samples).stage("folds", &hash)?;
            let (data, test) = standard_split(&samples, &plan, rotation);
            let result =
                privacy_metric(&model, &data.train, &test, &cfg.probe, probe_seed(&cfg, rotation)).stage("attack", &hash)?;
            let spec = model.spec();
            let record = AttackRecord {
                dataset: "synthetic",
                modality: spec.modality,
                task: spec.task,
                mode: spec.mode,
                lambda: (spec.mode == Mode::Priv).then(|| spec.adversaries[0].lambda),
                attack: &result,
            };
            let out = out_dir(&common, &cfg);
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            write_json(&out.join("attack.json"), &record)?;
            println!("P = {:.4}{}", result.metric, if result.flagged { " (flagged)" } else { "" });
        }
        Command::Mi { common, select } => {
            let cfg = load_config(&common)?;
            let hash = cfg.hash();
            let corpus = corpus_for(&cfg, select.corpus.as_deref()).stage("corpus", &hash)?;
            let plan = fold_plan(&cfg, &corpus).stage("folds", &hash)?;
            let (modality, task, mode) = selection(&select);
            let spec = single_spec(&cfg, modality, task, mode);
            let mi = membership_split(&cfg, &corpus, &plan, select.rotation).stage("membership-split", &hash)?;
            let seed = derive_seed(run_seed(&cfg, select.rotation), &[cfg.train.seeds.first().copied().unwrap_or(0)]);
            let (model, history, result) =
                membership_run(&cfg, &spec, &corpus, &mi, seed, probe_seed(&cfg, select.rotation)).stage("membership", &hash)?;
            let out = out_dir(&common, &cfg);
            save_checkpoint(&model, &out.join("checkpoint")).stage("write-checkpoint", &hash)?;
            write_history(&out.join("history.jsonl"), &history).stage("write-history", &hash)?;
            let record = AttackRecord {
                dataset: "synthetic",
                modality,
                task,
                mode,
                lambda: (mode == Mode::Priv).then(|| spec.adversaries[0].lambda),
                attack: &result,
            };
            write_json(&out.join("mi.json"), &record)?;
            println!("MI = {:.4}{}", result.metric, if result.flagged { " (flagged)" } else { "" });
        }
        Command::Experiment(common) => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let report = run_experiment_to(&cfg, &out)?;
            print!("{}", emit_table(&report));
        }
        Command::Report { out } => {
            let path = out.join("report.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let report = MetricsReport::from_json(&text)?;
            report.write(&out)?;
            print!("{}", emit_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
