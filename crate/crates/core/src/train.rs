//! Gradient training over freshly synthesized batches, with a frozen first phase.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{
    example_losses, is_frozen_in_phase_one, total_loss, AudioMode, LossBreakdown, Net, Optimizer, ToyAvsrModel,
};
use crate::params::ParamStore;
use crate::synth::{derive_seed, rng_for, Example, NoiseCategory, NoiseCondition, SeedSpace, SynthWorld, TRAIN_SNR_DB};
use crate::tensor::Matrix;

const INDEX_MASK: u64 = (1 << 56) - 1;

/// One training draw: which utterance, under which noise, with which audio mode.
#[derive(Clone, Debug)]
pub struct TrainingDraw {
    pub example: Example,
    pub mode: AudioMode,
    /// Seed for the temporal-loss sampling of this example.
    pub loss_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub frozen: bool,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub steps: usize,
    pub frozen_steps: usize,
    pub parameters: usize,
    pub stack_fraction: f64,
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
}

pub struct Trainer {
    cfg: RunConfig,
    world: SynthWorld,
    model: ToyAvsrModel,
    step: usize,
    adam: AdamState,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, created lazily per parameter.
#[derive(Default)]
struct AdamState {
    moments: std::collections::HashMap<String, (Matrix, Matrix, i32)>,
}

impl AdamState {
    fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64) {
        let (m, v, t) = self.moments.entry(name.to_string()).or_insert_with(|| {
            let (r, c) = grad.shape();
            (Matrix::zeros(r, c), Matrix::zeros(r, c), 0)
        });
        *t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(*t);
        let c2 = 1.0 - ADAM_BETA2.powi(*t);
        let slices = param.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
        for (((p, &g), m), v) in slices {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ToyAvsrModel::init(&cfg.model, &cfg.synth, cfg.train.seed)?;
        Self::from_model(cfg, model)
    }

    /// Continues from existing weights; the step counter starts at zero.
    pub fn from_model(cfg: RunConfig, model: ToyAvsrModel) -> Result<Self> {
        cfg.validate()?;
        let world = SynthWorld::new(cfg.synth.clone())?;
        Ok(Self {
            cfg,
            world,
            model,
            step: 0,
            adam: AdamState::default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn world(&self) -> &SynthWorld {
        &self.world
    }

    pub fn model(&self) -> &ToyAvsrModel {
        &self.model
    }

    pub fn into_model(self) -> ToyAvsrModel {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_frozen_phase(&self) -> bool {
        self.step < self.cfg.train.frozen_steps()
    }

    /// Deterministic in (`train.seed`, `step`, `slot`).
    pub fn training_draw(&self, step: usize, slot: usize) -> Result<TrainingDraw> {
        let step_seed = derive_seed(self.cfg.train.seed, step as u64);
        let mut rng = rng_for(step_seed, slot as u64);
        let utterance = SeedSpace::TrainUtterance.seed(rng.gen::<u64>() & INDEX_MASK);
        let category = NoiseCategory::ALL[rng.gen_range(0..NoiseCategory::ALL.len())];
        let noise_seed = SeedSpace::TrainNoise.seed(rng.gen::<u64>() & INDEX_MASK);
        let dropped = rng.gen::<f64>() < self.cfg.train.modality_dropout;
        let condition = NoiseCondition::noisy(category, TRAIN_SNR_DB)?;
        Ok(TrainingDraw {
            example: self.world.example(utterance, condition, noise_seed)?,
            mode: if dropped { AudioMode::DroppedAtFusion } else { AudioMode::Normal },
            loss_seed: rng.gen(),
        })
    }

    /// Objective and gradients for one batch at the current step, without
    /// updating anything. Gradients cover trainable parameters only.
    pub fn batch_gradients(&self) -> Result<(LossBreakdown, ParamStore)> {
        let frozen = self.is_frozen_phase();
        let trainable = |name: &str| !(frozen && is_frozen_in_phase_one(name));
        let mut tape = Tape::new();
        let bindings = tape.bind(&self.model.params, trainable);
        let net = Net::new(&self.model, &bindings);
        let mut losses = Vec::with_capacity(self.cfg.train.batch_size);
        for slot in 0..self.cfg.train.batch_size {
            let draw = self.training_draw(self.step, slot)?;
            losses.push(example_losses(
                &mut tape,
                &net,
                &draw.example,
                &self.cfg.train,
                &self.cfg.temporal,
                draw.mode,
                draw.loss_seed,
            )?);
        }
        let objective = total_loss(&mut tape, &losses, &self.cfg.train)?;
        let grads = tape.backward(objective.total)?;
        let mut out = grads.collect(&bindings);
        let frozen_names: Vec<String> = out.names().filter(|n| !trainable(n)).map(str::to_string).collect();
        for name in frozen_names {
            out.remove(&name);
        }
        Ok((objective.breakdown, out))
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let frozen = self.is_frozen_phase();
        let (breakdown, grads) = self.batch_gradients()?;
        let grad_norm = grads.iter().map(|(_, g)| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let max_norm = self.cfg.train.max_grad_norm;
        let clip = if max_norm > 0.0 && grad_norm > max_norm { max_norm / grad_norm } else { 1.0 };
        let lr = self.cfg.train.learning_rate * clip;
        for (name, g) in grads.iter() {
            let param = self.model.params.get_mut(name)?;
            match self.cfg.train.optimizer {
                Optimizer::Sgd => param.scaled_add_assign(-lr, g),
                Optimizer::Adam => {
                    let g = if clip < 1.0 { g.map(|x| x * clip) } else { g.clone() };
                    self.adam.update(name, param, &g, self.cfg.train.learning_rate);
                }
            }
        }
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite { op: "parameter update" });
        }
        let report = StepReport {
            step: self.step,
            frozen,
            grad_norm,
            breakdown,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs the remaining configured steps, reporting each one to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<TrainSummary> {
        let mut first = None;
        let mut last = None;
        while self.step < self.cfg.train.steps {
            let report = self.train_step()?;
            first.get_or_insert(report.breakdown);
            last = Some(report.breakdown);
            on_step(&report);
        }
        Ok(self.summary(first, last))
    }

    fn summary(&self, first: Option<LossBreakdown>, last: Option<LossBreakdown>) -> TrainSummary {
        TrainSummary {
            label: self.cfg.label.clone(),
            steps: self.step,
            frozen_steps: self.cfg.train.frozen_steps(),
            parameters: self.model.parameter_count(),
            stack_fraction: self.model.stack_fraction(),
            first,
            last,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.frames = 12;
        cfg.synth.vocab = 5;
        cfg.synth.raw_channels = 6;
        cfg.synth.babble_clips = 3;
        cfg.model = ModelConfig {
            dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_width: 8,
            predictor_hidden: 4,
            ..ModelConfig::default()
        };
        cfg.train.steps = steps;
        cfg.train.batch_size = 2;
        cfg
    }

    #[test]
    fn draws_are_reproducible_and_vary_by_slot() {
        let t = Trainer::new(tiny(4)).unwrap();
        let a = t.training_draw(3, 1).unwrap();
        let b = t.training_draw(3, 1).unwrap();
        let c = t.training_draw(3, 0).unwrap();
        assert_eq!(a.example, b.example);
        assert_ne!(a.example.seed, c.example.seed);
        assert_eq!(a.example.condition.snr_db(), Some(TRAIN_SNR_DB));
        assert_eq!(SeedSpace::of(a.example.seed), Some(SeedSpace::TrainUtterance));
    }

    #[test]
    fn frozen_phase_leaves_backbone_untouched() {
        let mut cfg = tiny(4);
        cfg.train.freeze_fraction = 0.5;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.model().params.clone();
        let r0 = t.train_step().unwrap();
        assert!(r0.frozen);
        for (name, m) in t.model().params.iter() {
            let moved = m.max_abs_diff(before.get(name).unwrap()) > 0.0;
            if is_frozen_in_phase_one(name) {
                assert!(!moved, "{name} moved while frozen");
            }
        }
        assert!(t.model().params.get("video.ca.Wfc2").unwrap().max_abs_diff(before.get("video.ca.Wfc2").unwrap()) > 0.0);
        t.train_step().unwrap();
        let mid = t.model().params.clone();
        let r2 = t.train_step().unwrap();
        assert!(!r2.frozen);
        let enc = "encoder.0.ffn.W1";
        assert!(t.model().params.get(enc).unwrap().max_abs_diff(mid.get(enc).unwrap()) > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = Trainer::new(tiny(3)).unwrap();
            t.run(|_| {}).unwrap();
            t.into_model().params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut cfg = tiny(1);
        cfg.train.freeze_fraction = 0.0;
        cfg.train.max_grad_norm = 1e-3;
        cfg.train.learning_rate = 1.0;
        cfg.train.optimizer = Optimizer::Sgd;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.model().params.clone();
        let report = t.train_step().unwrap();
        assert!(report.grad_norm > 1e-3);
        let moved: f64 = t
            .model()
            .params
            .iter()
            .map(|(n, m)| {
                let b = before.get(n).unwrap();
                m.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        assert!((moved - 1e-3).abs() < 1e-9, "{moved}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let mut cfg = tiny(2);
            cfg.train.freeze_fraction = 0.0;
            cfg.train.learning_rate = 0.0;
            cfg.train.optimizer = optimizer;
            let mut t = Trainer::new(cfg).unwrap();
            let before = crate::checkpoint::encode(&t.model().params);
            let r = t.train_step().unwrap();
            assert!(r.breakdown.total > 0.0);
            assert_eq!(crate::checkpoint::encode(&t.model().params), before);
        }
    }

    #[test]
    fn loss_decreases_on_a_short_run() {
        let mut cfg = tiny(40);
        cfg.train.freeze_fraction = 0.0;
        cfg.train.batch_size = 4;
        cfg.train.learning_rate = 0.01;
        let mut t = Trainer::new(cfg).unwrap();
        let mut asr = Vec::new();
        t.run(|r| asr.push(r.breakdown.l_asr)).unwrap();
        let head: f64 = asr[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = asr[asr.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
