//! Command-line surface: `train`, `eval`, `gradcheck` and `report`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_grid, predictor_accuracy, refinement_error, EvalOptions, RefinementReport};
use crate::gradcheck::run_suite;
use crate::metrics::{comparison_rows, render_comparison, EvalArtifact};
use crate::model::ToyAvsrModel;
use crate::synth::{NoiseCategory, NoiseCondition, SynthWorld};
use crate::train::{StepReport, TrainSummary, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.avck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const EVAL_VIDEO_ONLY_FILE: &str = "eval_video_only.jsonl";

/// Held-out utterances used for the post-training summary statistics.
const SUMMARY_UTTERANCES: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "avsr", version, about = "Desk-scale audio-visual speech recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, log, summary and effective config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the clean and noisy condition grid.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Zero the audio stream (lip-reading mode).
        #[arg(long)]
        video_only: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Destination of the evaluation records; defaults inside `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare evaluation outputs side by side.
    Report {
        #[arg(required = true)]
        outputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct LogRecord<'a> {
    #[serde(flatten)]
    step: &'a StepReport,
    wall_time_s: f64,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub train: TrainSummary,
    pub predictor_accuracy: std::collections::BTreeMap<String, f64>,
    pub refinement: RefinementReport,
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train { config, seed, out: dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(dir) = dir {
                cfg.output.dir = dir;
            }
            let summary = cmd_train(&cfg)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
            Ok(0)
        }
        Command::Eval {
            config,
            checkpoint,
            video_only,
            workers,
            out: dest,
        } => {
            let cfg = RunConfig::load(&config)?;
            let artifact = cmd_eval(&cfg, &checkpoint, video_only, workers)?;
            let default = if video_only { EVAL_VIDEO_ONLY_FILE } else { EVAL_FILE };
            let dest = dest.unwrap_or_else(|| cfg.output.dir.join(default));
            write_file(&dest, artifact.to_jsonl().as_bytes())?;
            write!(out, "{}", artifact.render_table())?;
            Ok(0)
        }
        Command::Gradcheck { config } => {
            let seed = match config {
                Some(path) => RunConfig::load(&path)?.train.seed,
                None => 0,
            };
            let report = run_suite(seed)?;
            for line in report.lines() {
                writeln!(out, "{line}")?;
            }
            let passed = report.passed();
            writeln!(
                out,
                "{} max relative error {:.3e}",
                if passed { "gradcheck passed;" } else { "gradcheck FAILED;" },
                report.max_relative_error()
            )?;
            Ok(if passed { 0 } else { 2 })
        }
        Command::Report { outputs } => {
            let artifacts = outputs
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    EvalArtifact::from_jsonl(&text)
                })
                .collect::<Result<Vec<_>>>()?;
            write!(out, "{}", render_comparison(&comparison_rows(&artifacts)?))?;
            Ok(0)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Trains and writes every run artifact into `cfg.output.dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    write_file(&dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join(TRAIN_LOG_FILE))?);
    let start = Instant::now();
    let mut io_error = None;
    let train = trainer.run(|step| {
        let record = LogRecord {
            step,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log.flush()?;
    let model = trainer.model();
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &model.params)?;
    let n = SUMMARY_UTTERANCES.min(cfg.eval.utterances);
    let summary = RunSummary {
        train,
        predictor_accuracy: predictor_accuracy(model, trainer.world(), &cfg.temporal, n)?
            .into_iter()
            .map(|(task, acc)| (task.as_str().to_string(), acc))
            .collect(),
        refinement: refinement_error(model, trainer.world(), &NoiseCategory::ALL, n)?,
    };
    write_file(
        &dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    Ok(summary)
}

/// Evaluates a checkpoint over the full grid.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, video_only: bool, workers: usize) -> Result<EvalArtifact> {
    cfg.validate()?;
    let params = checkpoint::load(checkpoint_path)?;
    let model = ToyAvsrModel::from_params(&cfg.model, &cfg.synth, params)?;
    let world = SynthWorld::new(cfg.synth.clone())?;
    let opts = EvalOptions {
        utterances: cfg.eval.utterances,
        video_only,
        workers,
        max_decode_len: cfg.max_decode_len(),
    };
    let table = evaluate_grid(&model, &world, &NoiseCondition::full_grid(), &opts)?;
    EvalArtifact::new(cfg.label.clone(), video_only, cfg.eval.utterances, table)
}
