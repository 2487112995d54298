//! Finite-difference suite over every differentiable piece of the system,
//! plus exact-zero checks of the two stop-gradient boundaries.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_stacks, stacked_forward, Architecture, StackConfig};
use crate::autodiff::{finite_diff_check, GradCheck, Tape, Var};
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::{example_losses, total_loss, AudioMode, ModelConfig, Net, ToyAvsrModel};
use crate::params::{Bindings, ParamStore};
use crate::refine::{clean_reference, loss_ref};
use crate::synth::{
    front_end, Example, FrontEndParams, Modality, NoiseCategory, NoiseCondition, RawSignal, SynthWorld,
};
use crate::temporal::{task_loss, TemporalConfig, TemporalPredictor, TemporalTask};
use crate::tensor::Matrix;

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Sequence length and width of the small instances.
const FRAMES: usize = 4;
const DIM: usize = 4;
const HEADS: usize = 2;
/// The default speed window spans `(3 - 1) * 2 + 1` frames.
const SPEED_FRAMES: usize = 5;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub check: GradCheck,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.check.max_relative_error < TOLERANCE && self.check.analytic_l1 > 0.0
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} max_rel_err={:.3e} coords={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.check.max_relative_error,
            self.check.coordinates
        )?;
        if !self.passed() {
            if let Some(p) = &self.check.worst_param {
                write!(f, " worst={p}[{}]", self.check.worst_index)?;
            }
        }
        Ok(())
    }
}

/// Which stack parameters a loss reached through one backward pass.
#[derive(Clone, Debug)]
pub struct IsolationResult {
    pub name: String,
    /// Parameters that must receive exactly zero gradient.
    pub blocked: usize,
    pub blocked_nonzero: Vec<String>,
    /// Parameters that must receive some gradient.
    pub open: usize,
    pub open_zero: Vec<String>,
}

impl IsolationResult {
    pub fn passed(&self) -> bool {
        self.blocked > 0 && self.blocked_nonzero.is_empty() && self.open_zero.is_empty()
    }
}

impl fmt::Display for IsolationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} exact_zero={}/{} reached={}/{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.blocked - self.blocked_nonzero.len(),
            self.blocked,
            self.open - self.open_zero.len(),
            self.open
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub isolation: Vec<IsolationResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed) && self.isolation.iter().all(IsolationResult::passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.cases.iter().map(|c| c.check.max_relative_error).fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self.cases.iter().map(ToString::to_string).collect();
        out.extend(self.isolation.iter().map(ToString::to_string));
        out
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::randn(rows, cols, 1.0, rng)
}

/// Scalar readout `sum(x R)` with a fixed random column `R`.
fn readout(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(randn(tape.shape(x).1, 1, &mut rng));
    let y = tape.matmul(x, r)?;
    tape.sum_all(y)
}

fn case(name: &str, point: &ParamStore, only: Option<&[&str]>, f: impl Fn(&mut Tape, &Bindings) -> Result<Var>) -> Result<CaseResult> {
    Ok(CaseResult {
        name: name.to_string(),
        check: finite_diff_check(point, EPS, only, f)?,
    })
}

type Primitive = (&'static str, fn(&mut Tape, &Bindings) -> Result<Var>);

const PRIMITIVES: &[Primitive] = &[
    ("matmul", |t, b| {
        let y = t.matmul(b.get("a")?, b.get("b")?)?;
        readout(t, y, 1)
    }),
    ("transpose", |t, b| {
        let y = t.transpose(b.get("a")?)?;
        readout(t, y, 2)
    }),
    ("add", |t, b| {
        let y = t.add(b.get("a")?, b.get("c")?)?;
        readout(t, y, 3)
    }),
    ("sub", |t, b| {
        let y = t.sub(b.get("a")?, b.get("c")?)?;
        readout(t, y, 4)
    }),
    ("add_row", |t, b| {
        let y = t.add_row(b.get("a")?, b.get("row")?)?;
        readout(t, y, 5)
    }),
    ("scale", |t, b| {
        let y = t.scale(b.get("a")?, -1.7)?;
        readout(t, y, 6)
    }),
    ("relu", |t, b| {
        let y = t.relu(b.get("a")?)?;
        readout(t, y, 7)
    }),
    ("softmax_rows", |t, b| {
        let y = t.softmax_rows(b.get("a")?)?;
        readout(t, y, 8)
    }),
    ("softmax_rows_causal", |t, b| {
        let y = t.softmax_rows_causal(b.get("square")?)?;
        readout(t, y, 9)
    }),
    ("concat_channels", |t, b| {
        let y = t.concat_channels(&[b.get("a")?, b.get("c")?])?;
        readout(t, y, 10)
    }),
    ("slice_cols", |t, b| {
        let y = t.slice_cols(b.get("a")?, 1, 2)?;
        readout(t, y, 11)
    }),
    ("gather_rows", |t, b| {
        let y = t.gather_rows(b.get("a")?, &[3, 0, 3, 1])?;
        readout(t, y, 12)
    }),
    ("conv1d_temporal", |t, b| {
        let y = t.conv1d_temporal(b.get("a")?, b.get("kernel")?, 3, 2)?;
        readout(t, y, 13)
    }),
    ("segment_mean", |t, b| {
        let y = t.segment_mean(b.get("a")?, 2)?;
        readout(t, y, 14)
    }),
    ("bce_with_logits", |t, b| t.bce_with_logits(b.get("logits")?, &[1.0, 0.0, 0.0, 1.0])),
    ("mse", |t, b| t.mse(b.get("a")?, b.get("c")?)),
    ("cross_entropy", |t, b| t.cross_entropy(b.get("a")?, &[2, 0, 3, 3])),
    ("mean_all", |t, b| {
        let y = t.relu(b.get("a")?)?;
        t.mean_all(y)
    }),
    ("sum_all", |t, b| {
        let y = t.softmax_rows(b.get("a")?)?;
        let y = t.matmul(y, b.get("b")?)?;
        t.sum_all(y)
    }),
    ("combine", |t, b| {
        let x = t.mse(b.get("a")?, b.get("c")?)?;
        let y = readout(t, b.get("b")?, 15)?;
        t.combine(&[(x, 0.3), (y, -2.0)])
    }),
    ("stop_gradient", |t, b| {
        let a = b.get("a")?;
        let s = t.stop_gradient(a)?;
        let st = t.transpose(s)?;
        let y = t.matmul(a, st)?;
        readout(t, y, 16)
    }),
];

fn primitive_point(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("a".into(), randn(FRAMES, DIM, &mut rng));
    p.insert("b".into(), randn(DIM, 3, &mut rng));
    p.insert("c".into(), randn(FRAMES, DIM, &mut rng));
    p.insert("row".into(), randn(1, DIM, &mut rng));
    p.insert("square".into(), randn(FRAMES, FRAMES, &mut rng));
    p.insert("kernel".into(), randn(3 * DIM, 3, &mut rng));
    p.insert("logits".into(), randn(4, 1, &mut rng));
    p
}

fn primitive_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let point = primitive_point(seed);
    PRIMITIVES
        .iter()
        .map(|(name, f)| case(&format!("primitive/{name}"), &point, None, f))
        .collect()
}

fn stack_point(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<(StackConfig, ParamStore)> {
    let cfg = StackConfig {
        dim: DIM,
        heads: HEADS,
        architecture: arch,
    };
    let mut p = ParamStore::new();
    init_stacks(&cfg, rng, &mut p)?;
    // larger residual projections make the stacks' contribution visible
    for (name, m) in p.iter_mut() {
        if name.ends_with("Wfc2") || name.ends_with("Wfc4") {
            *m = randn(DIM, DIM, rng).map(|x| 0.5 * x);
        }
    }
    Ok((cfg, p))
}

fn stack_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57ac);
    let f_v = randn(FRAMES, DIM, &mut rng);
    let f_a = randn(FRAMES, DIM, &mut rng);
    let mut out = Vec::new();
    for arch in Architecture::ALL {
        let (cfg, point) = stack_point(arch, &mut rng)?;
        for modality in [Modality::Video, Modality::Audio] {
            let prefix = format!("{}.", modality.as_str());
            let names: Vec<&str> = point.names().filter(|n| n.starts_with(&prefix)).collect();
            let name = format!("stack/{}/{}", modality.as_str(), arch.as_str());
            out.push(case(&name, &point, Some(&names), |t, b| {
                let (v, a) = (t.constant(f_v.clone()), t.constant(f_a.clone()));
                let pair = stacked_forward(t, b, &cfg, v, a)?;
                let target = if modality == Modality::Video { pair.video } else { pair.audio };
                readout(t, target, 21)
            })?);
        }
    }
    Ok(out)
}

fn temporal_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3f);
    let cfg = TemporalConfig::default();
    let mut out = Vec::new();
    for task in TemporalTask::ALL {
        let frames = if task == TemporalTask::Speed { SPEED_FRAMES } else { FRAMES };
        let mut point = ParamStore::new();
        TemporalPredictor::for_task(task, DIM, 3).init(&mut rng, &mut point);
        // trained-scale weights keep the logits away from zero
        for (_, m) in point.iter_mut() {
            *m = m.map(|x| 3.0 * x);
        }
        point.insert("features.video".into(), randn(frames, DIM, &mut rng));
        point.insert("features.audio".into(), randn(frames, DIM, &mut rng));
        let loss_seed = rng.gen();
        out.push(case(&format!("loss/{}", task.as_str()), &point, None, |t, b| {
            let (v, a) = (b.get("features.video")?, b.get("features.audio")?);
            Ok(task_loss(t, b, task, v, a, &cfg, loss_seed)?.loss)
        })?);
    }
    Ok(out)
}

fn raw(modality: Modality, frames: usize, channels: usize, rng: &mut ChaCha8Rng) -> RawSignal {
    RawSignal::new(modality, randn(frames, channels, rng))
}

fn refine_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ef1);
    let channels = 3;
    let mut point = ParamStore::new();
    FrontEndParams::init(Modality::Audio, channels, DIM, &mut rng).insert_into(&mut point);
    point.insert("features.delta".into(), randn(FRAMES, DIM, &mut rng));
    let noisy = raw(Modality::Audio, FRAMES, channels, &mut rng);
    let clean = raw(Modality::Audio, FRAMES, channels, &mut rng);
    case("loss/ref", &point, None, |t, b| {
        let reference = clean_reference(t, b, Some(&clean))?;
        let f_a = front_end(t, b, &noisy)?;
        let refined = t.add(f_a, b.get("features.delta")?)?;
        loss_ref(t, refined, &reference)
    })
}

/// The smallest complete configuration: one encoder and one decoder layer.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.frames = SPEED_FRAMES;
    cfg.synth.vocab = 3;
    cfg.synth.raw_channels = 3;
    cfg.synth.min_duration = 1;
    cfg.synth.max_duration = 2;
    cfg.synth.babble_clips = 2;
    cfg.model = ModelConfig {
        dim: DIM,
        heads: HEADS,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_width: 2 * DIM,
        predictor_hidden: 3,
        architecture: Architecture::SaCa,
    };
    cfg
}

fn tiny_model(seed: u64) -> Result<(RunConfig, ToyAvsrModel, SynthWorld)> {
    let cfg = tiny_run_config();
    let mut model = ToyAvsrModel::init(&cfg.model, &cfg.synth, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf011);
    for (name, m) in model.params.iter_mut() {
        if name.ends_with("Wfc2") || name.ends_with("Wfc4") || name == "decoder.out.W" {
            *m = randn(m.rows(), m.cols(), &mut rng).map(|x| 0.5 * x);
        }
    }
    let world = SynthWorld::new(cfg.synth.clone())?;
    Ok((cfg, model, world))
}

fn objective_case(seed: u64) -> Result<CaseResult> {
    let (cfg, model, world) = tiny_model(seed)?;
    let condition = NoiseCondition::noisy(NoiseCategory::Babble, 0)?;
    let example = world.example(seed, condition, seed.wrapping_add(1))?;
    case("objective/full", &model.params, None, |t, b| {
        let net = Net::new(&model, b);
        let losses = example_losses(t, &net, &example, &cfg.train, &cfg.temporal, AudioMode::Normal, seed)?;
        Ok(total_loss(t, &[losses], &cfg.train)?.total)
    })
}

/// One backward pass of the temporal losses and one of the refinement loss,
/// recording which streamline's stack parameters each reached.
pub fn stop_gradient_isolation(
    model: &ToyAvsrModel,
    example: &Example,
    temporal: &TemporalConfig,
    seed: u64,
) -> Result<Vec<IsolationResult>> {
    let mut out = Vec::new();
    for (name, blocked, open) in [
        ("isolation/temporal->audio stack", "audio.", "video."),
        ("isolation/ref->video stack", "video.", "audio."),
    ] {
        let mut tape = Tape::new();
        let bindings = tape.bind(&model.params, |_| true);
        let net = Net::new(model, &bindings);
        let (f_v, f_a) = net.features(&mut tape, example, AudioMode::Normal)?;
        let pair = net.enhance(&mut tape, f_v, f_a)?;
        let loss = if blocked == "audio." {
            let mut terms = Vec::new();
            for task in TemporalTask::ALL {
                let l = task_loss(&mut tape, &bindings, task, pair.video, pair.audio, temporal, seed)?.loss;
                terms.push((l, 1.0));
            }
            tape.combine(&terms)?
        } else {
            let reference = clean_reference(&mut tape, &bindings, Some(&example.clean_audio))?;
            loss_ref(&mut tape, pair.audio, &reference)?
        };
        let grads = tape.backward(loss)?.collect(&bindings);
        let nonzero = |m: &Matrix| m.as_slice().iter().any(|&x| x != 0.0);
        let mut result = IsolationResult {
            name: name.to_string(),
            blocked: 0,
            blocked_nonzero: Vec::new(),
            open: 0,
            open_zero: Vec::new(),
        };
        for (param, g) in grads.iter() {
            if param.starts_with(blocked) {
                result.blocked += 1;
                if nonzero(g) {
                    result.blocked_nonzero.push(param.to_string());
                }
            } else if param.starts_with(open) {
                result.open += 1;
                if !nonzero(g) {
                    result.open_zero.push(param.to_string());
                }
            }
        }
        out.push(result);
    }
    Ok(out)
}

fn isolation_cases(seed: u64) -> Result<Vec<IsolationResult>> {
    let (cfg, model, world) = tiny_model(seed)?;
    let condition = NoiseCondition::noisy(NoiseCategory::Speech, 0)?;
    let example = world.example(seed, condition, seed.wrapping_add(7))?;
    stop_gradient_isolation(&model, &example, &cfg.temporal, seed)
}

/// Runs every case; numeric failures are reported, not returned as errors.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut cases = primitive_cases(seed)?;
    cases.extend(stack_cases(seed)?);
    cases.extend(temporal_cases(seed)?);
    cases.push(refine_case(seed)?);
    cases.push(objective_case(seed)?);
    Ok(SuiteReport {
        cases,
        isolation: isolation_cases(seed)?,
    })
}
