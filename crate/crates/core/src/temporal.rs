//! Video temporal-dynamics losses: cross-modal context order, playback
//! direction and playback speed.
//!
//! Each task owns a predictor (temporal conv, mean pool over time, one
//! affine logit). Predictors are only built for training.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::synth::rng_for;
use crate::tensor::Matrix;

/// Temporal kernel width of every predictor.
pub const PREDICTOR_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalTask {
    Order,
    Direction,
    Speed,
}

impl TemporalTask {
    pub const ALL: [TemporalTask; 3] = [TemporalTask::Order, TemporalTask::Direction, TemporalTask::Speed];

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalTask::Order => "order",
            TemporalTask::Direction => "direction",
            TemporalTask::Speed => "speed",
        }
    }

    /// Chance-level loss: order is one BCE term per pair, the others two
    /// per window.
    pub fn terms_per_example(self) -> f64 {
        match self {
            TemporalTask::Order => 1.0,
            _ => 2.0,
        }
    }
}

impl fmt::Display for TemporalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Window length `t` for direction and speed.
    pub window: usize,
    /// Frame skip `k` of the fast-playback negatives.
    pub skip: usize,
    /// Order pairs per sequence, as a multiple of `T`.
    pub order_pairs_per_frame: usize,
    /// Start stride of direction and speed windows.
    pub stride: usize,
    /// Pair video frames with video frames in the order task.
    pub video_to_video_order: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            window: 3,
            skip: 2,
            order_pairs_per_frame: 4,
            stride: 1,
            video_to_video_order: false,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("temporal window {} is below 2", self.window)));
        }
        if self.skip < 2 {
            return Err(Error::Config(format!(
                "speed skip must exceed 1 (got {}); with 1 both classes coincide",
                self.skip
            )));
        }
        if self.stride == 0 || self.order_pairs_per_frame == 0 {
            return Err(Error::Config("stride and order pairs must be positive".into()));
        }
        Ok(())
    }

    pub fn order_pairs(&self, frames: usize) -> usize {
        self.order_pairs_per_frame * frames
    }

    /// Checks that `frames` leaves room for at least one window of each task.
    pub fn validate_frames(&self, frames: usize) -> Result<()> {
        direction_starts(frames, self)?;
        speed_starts(frames, self)?;
        Ok(())
    }
}

/// Parameter names of one predictor.
#[derive(Clone, Debug)]
pub struct PredictorNames {
    pub conv_w: String,
    pub conv_b: String,
    pub fc_w: String,
    pub fc_b: String,
}

impl PredictorNames {
    pub fn new(task: TemporalTask) -> Self {
        let p = format!("pred.{task}");
        Self {
            conv_w: format!("{p}.conv.W"),
            conv_b: format!("{p}.conv.b"),
            fc_w: format!("{p}.fc.W"),
            fc_b: format!("{p}.fc.b"),
        }
    }

    pub fn prefix(task: TemporalTask) -> String {
        format!("pred.{task}.")
    }
}

/// Shape of one task's predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalPredictor {
    pub task: TemporalTask,
    pub input_width: usize,
    pub hidden: usize,
}

impl TemporalPredictor {
    /// Order sees concatenated frame pairs (`2D`); the others see `D`.
    pub fn for_task(task: TemporalTask, dim: usize, hidden: usize) -> Self {
        let input_width = match task {
            TemporalTask::Order => 2 * dim,
            _ => dim,
        };
        Self { task, input_width, hidden }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        let n = PredictorNames::new(self.task);
        let fan_in = (PREDICTOR_KERNEL * self.input_width) as f64;
        store.insert(
            n.conv_w,
            Matrix::randn(PREDICTOR_KERNEL * self.input_width, self.hidden, 1.0 / fan_in.sqrt(), rng),
        );
        store.insert(n.conv_b, Matrix::zeros(1, self.hidden));
        store.insert(n.fc_w, Matrix::randn(self.hidden, 1, 1.0 / (self.hidden as f64).sqrt(), rng));
        store.insert(n.fc_b, Matrix::zeros(1, 1));
    }
}

/// Logits for stacked windows: `windows` holds `n * seg_len` rows, one
/// window per `seg_len` consecutive rows. Returns `n x 1`.
pub fn predictor_logits(
    tape: &mut Tape,
    bindings: &Bindings,
    task: TemporalTask,
    windows: Var,
    seg_len: usize,
) -> Result<Var> {
    let n = PredictorNames::new(task);
    let conv_w = bindings.get(&n.conv_w)?;
    let expected = tape.shape(conv_w).0 / PREDICTOR_KERNEL;
    let width = tape.shape(windows).1;
    if width != expected {
        return Err(Error::dim(
            "predictor_logit",
            format!("{task} predictor expects width {expected}, got {width}"),
        ));
    }
    let h = tape.conv1d_temporal(windows, conv_w, PREDICTOR_KERNEL, seg_len)?;
    let h = tape.add_row(h, bindings.get(&n.conv_b)?)?;
    let pooled = if seg_len == 1 { h } else { tape.segment_mean(h, seg_len)? };
    let z = tape.matmul(pooled, bindings.get(&n.fc_w)?)?;
    tape.add_row(z, bindings.get(&n.fc_b)?)
}

/// Logit of a single window (`frames` rows, one per time step).
pub fn predictor_logit(tape: &mut Tape, bindings: &Bindings, task: TemporalTask, frames: Var) -> Result<Var> {
    let len = tape.shape(frames).0;
    predictor_logits(tape, bindings, task, frames, len)
}

/// `n` distinct ordered pairs `(i, j)`, `i != j`, half of them with `i < j`.
/// Requests beyond the `T(T-1)` available pairs return all of them.
pub fn sample_order_pairs(frames: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if frames < 2 {
        return Err(Error::NoPairs { len: frames });
    }
    if n == 0 {
        return Err(Error::Config("order pair count must be positive".into()));
    }
    let half_pool = frames * (frames - 1) / 2;
    let n = n.min(2 * half_pool);
    let n_fwd = n.div_ceil(2).min(half_pool);
    let n_bwd = n - n_fwd;
    let mut rng = rng_for(seed, 0x0DE5);
    // pair index p in 0..half_pool enumerates i < j row by row
    let decode = |mut p: usize| {
        let mut i = 0;
        let mut row = frames - 1;
        while p >= row {
            p -= row;
            i += 1;
            row -= 1;
        }
        (i, i + 1 + p)
    };
    let mut pairs: Vec<(usize, usize)> = sample(&mut rng, half_pool, n_fwd).into_iter().map(decode).collect();
    pairs.extend(
        sample(&mut rng, half_pool, n_bwd)
            .into_iter()
            .map(|p| {
                let (i, j) = decode(p);
                (j, i)
            }),
    );
    // interleave the classes deterministically
    for k in (1..pairs.len()).rev() {
        let other = rng.gen_range(0..=k);
        pairs.swap(k, other);
    }
    Ok(pairs)
}

fn direction_starts(frames: usize, cfg: &TemporalConfig) -> Result<Vec<usize>> {
    if frames < cfg.window {
        return Err(Error::NoWindows(format!(
            "{frames} frames for direction windows of {}",
            cfg.window
        )));
    }
    Ok((0..=frames - cfg.window).step_by(cfg.stride).collect())
}

fn speed_starts(frames: usize, cfg: &TemporalConfig) -> Result<Vec<usize>> {
    let span = (cfg.window - 1) * cfg.skip;
    if frames < span + 1 {
        return Err(Error::NoWindows(format!(
            "{frames} frames for speed windows spanning {}",
            span + 1
        )));
    }
    Ok((0..frames - span).step_by(cfg.stride).collect())
}

/// Stacked predictor input, window length and labels of one task.
pub struct TaskInputs {
    pub windows: Var,
    pub seg_len: usize,
    pub labels: Vec<f64>,
}

/// Builds the positive and negative examples of `task` for one sequence.
pub fn task_inputs(
    tape: &mut Tape,
    task: TemporalTask,
    video: Var,
    audio: Var,
    cfg: &TemporalConfig,
    seed: u64,
) -> Result<TaskInputs> {
    let frames = tape.shape(video).0;
    let t = cfg.window;
    match task {
        TemporalTask::Order => {
            if tape.shape(audio) != tape.shape(video) {
                return Err(Error::Pairing("order task needs paired shapes".into()));
            }
            let pairs = sample_order_pairs(frames, cfg.order_pairs(frames), seed)?;
            let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let left = tape.gather_rows(video, &is)?;
            let source = if cfg.video_to_video_order {
                video
            } else {
                tape.stop_gradient(audio)?
            };
            let right = tape.gather_rows(source, &js)?;
            let windows = tape.concat_channels(&[left, right])?;
            let labels = pairs.iter().map(|&(i, j)| if i < j { 1.0 } else { 0.0 }).collect();
            Ok(TaskInputs { windows, seg_len: 1, labels })
        }
        TemporalTask::Direction => {
            let starts = direction_starts(frames, cfg)?;
            let mut idx = Vec::with_capacity(2 * starts.len() * t);
            for &i in &starts {
                idx.extend(i..i + t);
            }
            for &i in &starts {
                idx.extend((i..i + t).rev());
            }
            let windows = tape.gather_rows(video, &idx)?;
            let labels = labels_pos_neg(starts.len());
            Ok(TaskInputs { windows, seg_len: t, labels })
        }
        TemporalTask::Speed => {
            let starts = speed_starts(frames, cfg)?;
            let mut idx = Vec::with_capacity(2 * starts.len() * t);
            for &i in &starts {
                idx.extend(i..i + t);
            }
            for &i in &starts {
                idx.extend((0..t).map(|s| i + s * cfg.skip));
            }
            let windows = tape.gather_rows(video, &idx)?;
            let labels = labels_pos_neg(starts.len());
            Ok(TaskInputs { windows, seg_len: t, labels })
        }
    }
}

fn labels_pos_neg(n: usize) -> Vec<f64> {
    let mut labels = vec![1.0; n];
    labels.resize(2 * n, 0.0);
    labels
}

/// Loss and logits of one task on one sequence.
pub struct TaskOutcome {
    pub loss: Var,
    pub logits: Var,
    pub labels: Vec<f64>,
}

impl TaskOutcome {
    /// Fraction of examples whose logit sign matches the label.
    pub fn correct(&self, tape: &Tape) -> (usize, usize) {
        let z = tape.value(self.logits);
        let hits = z
            .as_slice()
            .iter()
            .zip(&self.labels)
            .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
            .count();
        (hits, self.labels.len())
    }
}

/// Order, direction or speed loss on one enhanced pair.
///
/// Order is the mean BCE over sampled pairs. Direction and speed are the
/// mean over windows of the positive plus negative BCE terms.
pub fn task_loss(
    tape: &mut Tape,
    bindings: &Bindings,
    task: TemporalTask,
    video: Var,
    audio: Var,
    cfg: &TemporalConfig,
    seed: u64,
) -> Result<TaskOutcome> {
    let inputs = task_inputs(tape, task, video, audio, cfg, seed)?;
    let logits = predictor_logits(tape, bindings, task, inputs.windows, inputs.seg_len)?;
    let bce = tape.bce_with_logits(logits, &inputs.labels)?;
    let loss = match task {
        TemporalTask::Order => bce,
        _ => tape.scale(bce, 2.0)?,
    };
    Ok(TaskOutcome {
        loss,
        logits,
        labels: inputs.labels,
    })
}

pub fn loss_order(
    tape: &mut Tape,
    bindings: &Bindings,
    video: Var,
    audio: Var,
    cfg: &TemporalConfig,
    seed: u64,
) -> Result<Var> {
    Ok(task_loss(tape, bindings, TemporalTask::Order, video, audio, cfg, seed)?.loss)
}

pub fn loss_direction(tape: &mut Tape, bindings: &Bindings, video: Var, cfg: &TemporalConfig) -> Result<Var> {
    Ok(task_loss(tape, bindings, TemporalTask::Direction, video, video, cfg, 0)?.loss)
}

pub fn loss_speed(tape: &mut Tape, bindings: &Bindings, video: Var, cfg: &TemporalConfig) -> Result<Var> {
    Ok(task_loss(tape, bindings, TemporalTask::Speed, video, video, cfg, 0)?.loss)
}

/// The enabled temporal components of one example.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemporalLosses {
    pub order: Option<Var>,
    pub direction: Option<Var>,
    pub speed: Option<Var>,
}

impl TemporalLosses {
    pub fn get(&self, task: TemporalTask) -> Option<Var> {
        match task {
            TemporalTask::Order => self.order,
            TemporalTask::Direction => self.direction,
            TemporalTask::Speed => self.speed,
        }
    }

    pub fn set(&mut self, task: TemporalTask, v: Var) {
        match task {
            TemporalTask::Order => self.order = Some(v),
            TemporalTask::Direction => self.direction = Some(v),
            TemporalTask::Speed => self.speed = Some(v),
        }
    }

    /// Unweighted sum of the enabled components, `None` if all are off.
    pub fn sum(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let terms: Vec<(Var, f64)> = [self.order, self.direction, self.speed]
            .into_iter()
            .flatten()
            .map(|v| (v, 1.0))
            .collect();
        if terms.is_empty() {
            return Ok(None);
        }
        tape.combine(&terms).map(Some)
    }
}
