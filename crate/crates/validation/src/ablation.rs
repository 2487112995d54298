//! Multi-seed loss ablations on the desk-scale model.

use std::collections::BTreeMap;
use std::time::Instant;

use avsr_core::config::RunConfig;
use avsr_core::evaluate::{evaluate_grid, predictor_accuracy, refinement_error, EvalOptions, RefinementReport};
use avsr_core::model::{LossFlags, ModelConfig};
use avsr_core::synth::{NoiseCategory, NoiseCondition, TRAIN_SNR_DB};
use avsr_core::temporal::TemporalTask;
use avsr_core::train::Trainer;
use avsr_core::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// ASR, temporal and refinement losses.
    Full,
    AsrTemporal,
    AsrOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::AsrTemporal, Variant::AsrOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "asr+temp+ref",
            Variant::AsrTemporal => "asr+temp",
            Variant::AsrOnly => "asr",
        }
    }

    pub fn losses(self) -> LossFlags {
        match self {
            Variant::Full => LossFlags::all(),
            Variant::AsrTemporal => LossFlags {
                refine: false,
                ..LossFlags::all()
            },
            Variant::AsrOnly => LossFlags::asr_only(),
        }
    }
}

/// Desk model, default objective weights, `steps` updates.
pub fn ablation_config(variant: Variant, seed: u64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        label: format!("{}-seed{seed}", variant.as_str()),
        model: ModelConfig::desk(),
        ..RunConfig::default()
    };
    cfg.train.steps = steps;
    cfg.train.seed = seed;
    cfg.train.losses = variant.losses();
    cfg
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub seed: u64,
    /// Held-out token error at 0 dB babble.
    pub babble_wer: f64,
    /// Held-out token error with the audio stream zeroed.
    pub video_only_wer: f64,
    pub accuracy: BTreeMap<TemporalTask, f64>,
    /// Feature noise before and after refinement, pooled over categories.
    pub refinement: RefinementReport,
    pub refinement_by_category: Vec<(NoiseCategory, RefinementReport)>,
    pub train_seconds: f64,
}

pub fn run_variant(variant: Variant, seed: u64, steps: usize, utterances: usize) -> Result<VariantOutcome> {
    let cfg = ablation_config(variant, seed, steps);
    let mut trainer = Trainer::new(cfg.clone())?;
    let start = Instant::now();
    trainer.run(|_| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    let (model, world) = (trainer.model(), trainer.world());

    let opts = EvalOptions {
        utterances,
        video_only: false,
        workers: 1,
        max_decode_len: cfg.max_decode_len(),
    };
    let babble = NoiseCondition::noisy(NoiseCategory::Babble, TRAIN_SNR_DB)?;
    let babble_wer = cell(evaluate_grid(model, world, &[babble], &opts)?.get(&babble))?;
    let video_only = EvalOptions {
        video_only: true,
        ..opts
    };
    let video_only_wer =
        cell(evaluate_grid(model, world, &[NoiseCondition::Clean], &video_only)?.get(&NoiseCondition::Clean))?;

    let per_category = utterances / NoiseCategory::ALL.len();
    let refinement_by_category = NoiseCategory::ALL
        .iter()
        .map(|&c| Ok((c, refinement_error(model, world, &[c], per_category)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantOutcome {
        variant,
        seed,
        babble_wer,
        video_only_wer,
        accuracy: predictor_accuracy(model, world, &cfg.temporal, utterances)?,
        refinement: refinement_error(model, world, &NoiseCategory::ALL, utterances)?,
        refinement_by_category,
        train_seconds,
    })
}

fn cell(value: Option<f64>) -> Result<f64> {
    value.ok_or_else(|| avsr_core::Error::IncompleteTable("requested condition missing".into()))
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}
