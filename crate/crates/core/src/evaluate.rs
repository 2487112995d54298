//! Held-out evaluation: the WER grid, predictor accuracy and refinement error.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{edit_distance, EvalTable};
use crate::model::{AudioMode, Net, ToyAvsrModel};
use crate::refine::{clean_reference, loss_ref};
use crate::synth::{
    derive_seed, mix_noise_at_snr, Example, NoiseCategory, NoiseCondition, SeedSpace, SynthWorld,
    TRAIN_SNR_DB,
};
use crate::temporal::{task_loss, TemporalConfig, TemporalTask};

pub fn eval_utterance_seed(index: usize) -> u64 {
    SeedSpace::EvalUtterance.seed(index as u64)
}

pub fn eval_noise_seed(index: usize) -> u64 {
    SeedSpace::EvalNoise.seed(index as u64)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub utterances: usize,
    pub video_only: bool,
    pub workers: usize,
    pub max_decode_len: usize,
}

/// Greedy hypothesis for one example; no temporal predictor takes part.
pub fn decode_example(model: &ToyAvsrModel, example: &Example, mode: AudioMode, max_len: usize) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bindings = tape.bind(&model.params, |_| false);
    let net = Net::new(model, &bindings);
    let (f_v, f_a) = net.features(&mut tape, example, mode)?;
    let pair = net.enhance(&mut tape, f_v, f_a)?;
    let memory = net.encode(&mut tape, &pair, mode)?;
    net.greedy_decode(&mut tape, memory, max_len)
}

/// The examples of one held-out utterance under each requested condition.
/// Noise is drawn once per category and rescaled for every SNR.
fn utterance_examples(world: &SynthWorld, index: usize, conditions: &[NoiseCondition]) -> Result<Vec<Example>> {
    let seed = eval_utterance_seed(index);
    let pair = world.synth_pair(seed);
    let mut noise = BTreeMap::new();
    let mut out = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        let noisy_audio = match condition {
            NoiseCondition::Clean => pair.audio.clone(),
            NoiseCondition::Noisy { category, snr_db } => {
                if let std::collections::btree_map::Entry::Vacant(e) = noise.entry(category) {
                    e.insert(world.noise(category, eval_noise_seed(index))?);
                }
                mix_noise_at_snr(&pair.audio, &noise[&category], snr_db as f64)?
            }
        };
        out.push(Example {
            seed,
            condition,
            script: pair.script.clone(),
            video: pair.video.clone(),
            clean_audio: pair.audio.clone(),
            noisy_audio,
        });
    }
    Ok(out)
}

fn check_conditions(conditions: &[NoiseCondition]) -> Result<()> {
    for c in conditions {
        if let NoiseCondition::Noisy { category, snr_db } = *c {
            NoiseCondition::noisy(category, snr_db)?;
        }
    }
    Ok(())
}

/// Splits `0..n` into contiguous chunks and runs `work` on each in its own
/// thread; results come back in index order.
fn parallel_map<T: Send>(n: usize, workers: usize, work: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    let work = &work;
    let parts: Vec<Result<Vec<T>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(work).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Token WER per condition, pooling edits and reference lengths over the
/// held-out utterances of each cell.
pub fn evaluate_grid(
    model: &ToyAvsrModel,
    world: &SynthWorld,
    conditions: &[NoiseCondition],
    opts: &EvalOptions,
) -> Result<EvalTable> {
    check_conditions(conditions)?;
    if opts.utterances == 0 {
        return Err(Error::Config("evaluation needs at least one utterance".into()));
    }
    let mode = if opts.video_only { AudioMode::VideoOnly } else { AudioMode::Normal };
    let per_utterance = parallel_map(opts.utterances, opts.workers, |i| {
        utterance_examples(world, i, conditions)?
            .iter()
            .map(|ex| {
                let hyp = decode_example(model, ex, mode, opts.max_decode_len)?;
                Ok((edit_distance(&ex.script.tokens, &hyp), ex.script.tokens.len()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut table = EvalTable::new();
    for (k, &condition) in conditions.iter().enumerate() {
        let (edits, words) = per_utterance
            .iter()
            .fold((0usize, 0usize), |(e, w), row| (e + row[k].0, w + row[k].1));
        table.insert(condition, 100.0 * edits as f64 / words as f64);
    }
    Ok(table)
}

fn zero_db_condition(index: usize) -> NoiseCondition {
    let category = NoiseCategory::ALL[index % NoiseCategory::ALL.len()];
    NoiseCondition::Noisy {
        category,
        snr_db: TRAIN_SNR_DB,
    }
}

/// Held-out binary accuracy of each temporal predictor on enhanced features
/// of 0 dB pairs, cycling through the noise categories.
pub fn predictor_accuracy(
    model: &ToyAvsrModel,
    world: &SynthWorld,
    temporal: &TemporalConfig,
    utterances: usize,
) -> Result<BTreeMap<TemporalTask, f64>> {
    let mut hits: BTreeMap<TemporalTask, (usize, usize)> = BTreeMap::new();
    for i in 0..utterances {
        let example = utterance_examples(world, i, &[zero_db_condition(i)])?.remove(0);
        let mut tape = Tape::new();
        let bindings = tape.bind(&model.params, |_| false);
        let net = Net::new(model, &bindings);
        let (f_v, f_a) = net.features(&mut tape, &example, AudioMode::Normal)?;
        let pair = net.enhance(&mut tape, f_v, f_a)?;
        for task in TemporalTask::ALL {
            let outcome = task_loss(
                &mut tape,
                &bindings,
                task,
                pair.video,
                pair.audio,
                temporal,
                derive_seed(eval_noise_seed(i), task as u64),
            )?;
            let (h, n) = outcome.correct(&tape);
            let entry = hits.entry(task).or_default();
            entry.0 += h;
            entry.1 += n;
        }
    }
    Ok(hits.into_iter().map(|(task, (h, n))| (task, h as f64 / n as f64)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    /// Mean squared distance of refined audio features to clean features.
    pub refined_mse: f64,
    /// Same distance for the unrefined noisy front-end features.
    pub noisy_mse: f64,
}

impl RefinementReport {
    pub fn ratio(&self) -> f64 {
        self.refined_mse / self.noisy_mse
    }
}

/// Feature-space noise before and after the video-to-audio refinement,
/// averaged over held-out pairs at 0 dB in `categories` (cycled).
pub fn refinement_error(
    model: &ToyAvsrModel,
    world: &SynthWorld,
    categories: &[NoiseCategory],
    utterances: usize,
) -> Result<RefinementReport> {
    if categories.is_empty() || utterances == 0 {
        return Err(Error::Config("refinement error needs categories and utterances".into()));
    }
    let (mut refined, mut noisy) = (0.0, 0.0);
    for i in 0..utterances {
        let condition = NoiseCondition::noisy(categories[i % categories.len()], TRAIN_SNR_DB)?;
        let example = utterance_examples(world, i, &[condition])?.remove(0);
        let mut tape = Tape::new();
        let bindings = tape.bind(&model.params, |_| false);
        let net = Net::new(model, &bindings);
        let reference = clean_reference(&mut tape, &bindings, Some(&example.clean_audio))?;
        let (f_v, f_a) = net.features(&mut tape, &example, AudioMode::Normal)?;
        let pair = net.enhance(&mut tape, f_v, f_a)?;
        let after = loss_ref(&mut tape, pair.audio, &reference)?;
        let before = loss_ref(&mut tape, f_a, &reference)?;
        refined += tape.value(after).item();
        noisy += tape.value(before).item();
    }
    let n = utterances as f64;
    Ok(RefinementReport {
        refined_mse: refined / n,
        noisy_mse: noisy / n,
    })
}
