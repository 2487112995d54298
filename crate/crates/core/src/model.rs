//! Desk-scale recognizer: front-ends, the two attention streamlines, a
//! fused transformer encoder and a token decoder trained with sequence NLL.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_traced, init_stacks, stack_parameter_count, stacked_forward, AttentionVars, Architecture,
    EnhancedPair, StackConfig,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, ResultExt};
use crate::params::{Bindings, ParamStore};
use crate::refine::{clean_reference, loss_ref};
use crate::synth::{derive_seed, front_end, Example, FrontEndParams, Modality, SynthConfig};
use crate::temporal::{task_loss, TemporalConfig, TemporalLosses, TemporalPredictor, TemporalTask};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width `D` shared by every stage.
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of the encoder and decoder feed-forward blocks.
    pub ffn_width: usize,
    /// Hidden width of the temporal predictors.
    pub predictor_hidden: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            ffn_width: 2048,
            predictor_hidden: 32,
            architecture: Architecture::SaCa,
        }
    }
}

impl ModelConfig {
    /// Narrow feed-forward blocks (`2D`) for quick training runs.
    pub fn desk() -> Self {
        Self {
            ffn_width: 64,
            ..Self::default()
        }
    }

    pub fn stack(&self) -> StackConfig {
        StackConfig {
            dim: self.dim,
            heads: self.heads,
            architecture: self.architecture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stack().validate()?;
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.ffn_width == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Which loss terms participate in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    pub order: bool,
    pub direction: bool,
    pub speed: bool,
    pub refine: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl LossFlags {
    pub fn all() -> Self {
        Self {
            order: true,
            direction: true,
            speed: true,
            refine: true,
        }
    }

    pub fn asr_only() -> Self {
        Self {
            order: false,
            direction: false,
            speed: false,
            refine: false,
        }
    }

    pub fn enabled(&self, task: TemporalTask) -> bool {
        match task {
            TemporalTask::Order => self.order,
            TemporalTask::Direction => self.direction,
            TemporalTask::Speed => self.speed,
        }
    }

    pub fn any_temporal(&self) -> bool {
        self.order || self.direction || self.speed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_temp: f64,
    pub lambda_ref: f64,
    pub steps: usize,
    /// Leading fraction of steps with front-ends, fusion and encoder frozen.
    pub freeze_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub losses: LossFlags,
    /// Probability of zeroing the audio stream at the fusion input.
    pub modality_dropout: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub optimizer: Optimizer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Fixed-rate stochastic gradient descent.
    Sgd,
    /// Adam with beta1 0.9, beta2 0.999, epsilon 1e-8.
    #[default]
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_temp: 0.05,
            lambda_ref: 0.1,
            steps: 1000,
            freeze_fraction: 0.8,
            learning_rate: 0.002,
            batch_size: 16,
            seed: 0,
            losses: LossFlags::all(),
            modality_dropout: 0.0,
            max_grad_norm: 0.0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_temp >= 0.0 && self.lambda_ref >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::Config(format!(
                "freeze_fraction {} is outside [0, 1]",
                self.freeze_fraction
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return Err(Error::Config("modality_dropout must lie in [0, 1]".into()));
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm < 0.0 {
            return Err(Error::Config("max_grad_norm must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of leading steps in the frozen phase.
    pub fn frozen_steps(&self) -> usize {
        (self.freeze_fraction * self.steps as f64).round() as usize
    }
}

/// Scalar values of every objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_asr: f64,
    pub l_order: f64,
    pub l_direction: f64,
    pub l_speed: f64,
    pub l_temp: f64,
    pub l_ref: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assembles the weighted total from component values.
    pub fn compose(l_asr: f64, order: f64, direction: f64, speed: f64, l_ref: f64, lambda_temp: f64, lambda_ref: f64) -> Self {
        let l_temp = order + direction + speed;
        Self {
            l_asr,
            l_order: order,
            l_direction: direction,
            l_speed: speed,
            l_temp,
            l_ref,
            total: l_asr + lambda_temp * l_temp + lambda_ref * l_ref,
        }
    }
}

/// Names of the parameters frozen in the first training phase.
pub const FROZEN_PREFIXES: [&str; 3] = ["frontend.", "fusion.", "encoder."];

pub fn is_frozen_in_phase_one(name: &str) -> bool {
    FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Recognizer parameters plus their layout.
#[derive(Clone, Debug)]
pub struct ToyAvsrModel {
    pub config: ModelConfig,
    /// Script vocabulary `V`; the decoder adds BOS and EOS.
    pub vocab: usize,
    pub channels: usize,
    pub params: ParamStore,
}

impl ToyAvsrModel {
    pub fn init(config: &ModelConfig, synth: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));
        let (d, f, out) = (config.dim, config.ffn_width, synth.vocab + 2);
        let mut p = ParamStore::new();
        for m in [Modality::Video, Modality::Audio] {
            FrontEndParams::init(m, synth.raw_channels, d, &mut rng).insert_into(&mut p);
        }
        init_stacks(&config.stack(), &mut rng, &mut p)?;
        p.insert("fusion.W".into(), Matrix::randn(2 * d, d, 1.0 / (2.0 * d as f64).sqrt(), &mut rng));
        p.insert("fusion.b".into(), Matrix::zeros(1, d));
        let std = 1.0 / (d as f64).sqrt();
        let attention = |p: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            for w in ["Wq", "Wk", "Wv", "Wo"] {
                p.insert(format!("{prefix}.{w}"), Matrix::randn(d, d, std, rng));
            }
        };
        let ffn = |p: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            p.insert(format!("{prefix}.W1"), Matrix::randn(d, f, std, rng));
            p.insert(format!("{prefix}.b1"), Matrix::zeros(1, f));
            p.insert(format!("{prefix}.W2"), Matrix::randn(f, d, 1.0 / (f as f64).sqrt(), rng));
            p.insert(format!("{prefix}.b2"), Matrix::zeros(1, d));
        };
        for l in 0..config.encoder_layers {
            attention(&mut p, &format!("encoder.{l}.attn"), &mut rng);
            ffn(&mut p, &format!("encoder.{l}.ffn"), &mut rng);
        }
        p.insert("decoder.embed".into(), Matrix::randn(out, d, 1.0, &mut rng));
        for l in 0..config.decoder_layers {
            attention(&mut p, &format!("decoder.{l}.self"), &mut rng);
            attention(&mut p, &format!("decoder.{l}.cross"), &mut rng);
            ffn(&mut p, &format!("decoder.{l}.ffn"), &mut rng);
        }
        p.insert("decoder.out.W".into(), Matrix::randn(d, out, 0.1 * std, &mut rng));
        p.insert("decoder.out.b".into(), Matrix::zeros(1, out));
        for task in TemporalTask::ALL {
            TemporalPredictor::for_task(task, d, config.predictor_hidden).init(&mut rng, &mut p);
        }
        Ok(Self {
            config: config.clone(),
            vocab: synth.vocab,
            channels: synth.raw_channels,
            params: p,
        })
    }

    /// Wraps loaded parameters after checking they match this layout.
    pub fn from_params(config: &ModelConfig, synth: &SynthConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config, synth, 0)?;
        for (name, m) in reference.params.iter() {
            let got = params.get(name).map_err(|_| {
                Error::Checkpoint(format!(
                    "parameter `{name}` missing; checkpoint does not match architecture {}",
                    config.architecture.as_str()
                ))
            })?;
            if got.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter `{extra}` for architecture {}",
                config.architecture.as_str()
            )));
        }
        Ok(Self {
            config: config.clone(),
            vocab: synth.vocab,
            channels: synth.raw_channels,
            params,
        })
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn eos(&self) -> usize {
        self.vocab + 1
    }

    /// Parameters of the recognizer proper, predictors excluded.
    pub fn parameter_count(&self) -> usize {
        self.params.count() - self.params.count_prefix("pred.")
    }

    /// Share of recognizer parameters that belong to the two streamlines.
    pub fn stack_fraction(&self) -> f64 {
        stack_parameter_count(&self.params) as f64 / self.parameter_count() as f64
    }
}

/// Sinusoidal position table, `rows x dim`.
pub fn positional_encoding(rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for pos in 0..rows {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// How the audio stream is treated in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AudioMode {
    #[default]
    Normal,
    /// Audio features zeroed before the stacks and at fusion.
    VideoOnly,
    /// Audio zeroed at the fusion input only.
    DroppedAtFusion,
}

/// Forward-pass helper over one set of bindings.
pub struct Net<'a> {
    pub model: &'a ToyAvsrModel,
    pub bindings: &'a Bindings,
}

impl<'a> Net<'a> {
    pub fn new(model: &'a ToyAvsrModel, bindings: &'a Bindings) -> Self {
        Self { model, bindings }
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.bindings.get(name)
    }

    /// Front-end features of the video and the (noisy) audio.
    pub fn features(&self, tape: &mut Tape, example: &Example, mode: AudioMode) -> Result<(Var, Var)> {
        let f_v = front_end(tape, self.bindings, &example.video)?;
        let f_a = if mode == AudioMode::VideoOnly {
            tape.constant(Matrix::zeros(example.noisy_audio.frames(), self.cfg().dim))
        } else {
            front_end(tape, self.bindings, &example.noisy_audio)?
        };
        Ok((f_v, f_a))
    }

    pub fn enhance(&self, tape: &mut Tape, f_v: Var, f_a: Var) -> Result<EnhancedPair> {
        stacked_forward(tape, self.bindings, &self.cfg().stack(), f_v, f_a)
    }

    fn attention_block(&self, tape: &mut Tape, prefix: &str, query: Var, kv: Var, causal: bool) -> Result<Var> {
        let w = AttentionVars::bind(self.bindings, prefix)?;
        let att = attention_traced(tape, query, kv, &w, self.cfg().heads, causal)?.output;
        let out = tape.matmul(att, self.p(&format!("{prefix}.Wo"))?)?;
        tape.add(query, out)
    }

    fn ffn_block(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.p(&format!("{prefix}.W1"))?)?;
        let h = tape.add_row(h, self.p(&format!("{prefix}.b1"))?)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, self.p(&format!("{prefix}.W2"))?)?;
        let o = tape.add_row(o, self.p(&format!("{prefix}.b2"))?)?;
        tape.add(x, o)
    }

    /// Fusion of the enhanced pair followed by the encoder blocks.
    pub fn encode(&self, tape: &mut Tape, pair: &EnhancedPair, mode: AudioMode) -> Result<Var> {
        let audio = match mode {
            AudioMode::Normal => pair.audio,
            _ => {
                let shape = tape.shape(pair.audio);
                tape.constant(Matrix::zeros(shape.0, shape.1))
            }
        };
        let fused = tape.concat_channels(&[pair.video, audio])?;
        let x = tape.matmul(fused, self.p("fusion.W")?)?;
        let x = tape.add_row(x, self.p("fusion.b")?)?;
        let (rows, d) = tape.shape(x);
        let pe = tape.constant(positional_encoding(rows, d));
        let mut x = tape.add(x, pe)?;
        for l in 0..self.cfg().encoder_layers {
            x = self.attention_block(tape, &format!("encoder.{l}.attn"), x, x, false)?;
            x = self.ffn_block(tape, &format!("encoder.{l}.ffn"), x)?;
        }
        Ok(x)
    }

    /// Next-token logits for every prefix of `inputs`, `len x (V+2)`.
    pub fn decoder_logits(&self, tape: &mut Tape, memory: Var, inputs: &[usize]) -> Result<Var> {
        let out = self.model.vocab + 2;
        if let Some(&bad) = inputs.iter().find(|&&t| t >= out) {
            return Err(Error::Domain(format!("token {bad} outside vocabulary of {out}")));
        }
        let emb = tape.gather_rows(self.p("decoder.embed")?, inputs)?;
        let pe = tape.constant(positional_encoding(inputs.len(), self.cfg().dim));
        let mut x = tape.add(emb, pe)?;
        for l in 0..self.cfg().decoder_layers {
            x = self.attention_block(tape, &format!("decoder.{l}.self"), x, x, true)?;
            x = self.attention_block(tape, &format!("decoder.{l}.cross"), x, memory, false)?;
            x = self.ffn_block(tape, &format!("decoder.{l}.ffn"), x)?;
        }
        let logits = tape.matmul(x, self.p("decoder.out.W")?)?;
        tape.add_row(logits, self.p("decoder.out.b")?)
    }

    /// Teacher-forced mean NLL of `script + EOS`.
    pub fn asr_nll(&self, tape: &mut Tape, memory: Var, script: &[usize]) -> Result<Var> {
        if let Some(&bad) = script.iter().find(|&&t| t >= self.model.vocab) {
            return Err(Error::Domain(format!(
                "script token {bad} outside vocabulary of {}",
                self.model.vocab
            )));
        }
        let mut inputs = Vec::with_capacity(script.len() + 1);
        inputs.push(self.model.bos());
        inputs.extend_from_slice(script);
        let mut targets = script.to_vec();
        targets.push(self.model.eos());
        let logits = self.decoder_logits(tape, memory, &inputs)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Autoregressive argmax decoding from BOS until EOS or `max_len` tokens.
    pub fn greedy_decode(&self, tape: &mut Tape, memory: Var, max_len: usize) -> Result<Vec<usize>> {
        let mut inputs = vec![self.model.bos()];
        let mut hyp = Vec::new();
        while hyp.len() < max_len {
            let logits = self.decoder_logits(tape, memory, &inputs)?;
            let last = tape.value(logits).row(inputs.len() - 1);
            let next = argmax(last);
            if next == self.model.eos() {
                break;
            }
            hyp.push(next);
            inputs.push(next);
        }
        Ok(hyp)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Loss nodes of one example; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct ExampleLosses {
    pub asr: Var,
    pub temporal: TemporalLosses,
    pub refine: Option<Var>,
}

/// Every enabled objective term for one example.
pub fn example_losses(
    tape: &mut Tape,
    net: &Net<'_>,
    example: &Example,
    train: &TrainConfig,
    temporal: &TemporalConfig,
    mode: AudioMode,
    seed: u64,
) -> Result<ExampleLosses> {
    let (f_v, f_a) = net.features(tape, example, mode).in_component("front-end")?;
    let pair = net.enhance(tape, f_v, f_a).in_component("attention stacks")?;
    let memory = net.encode(tape, &pair, mode).in_component("encoder")?;
    let asr = net.asr_nll(tape, memory, &example.script.tokens).in_component("asr")?;
    let mut temporal_losses = TemporalLosses::default();
    if train.lambda_temp > 0.0 {
        for task in TemporalTask::ALL {
            if train.losses.enabled(task) {
                let l = task_loss(tape, net.bindings, task, pair.video, pair.audio, temporal, derive_seed(seed, task as u64))
                    .in_component(task.as_str())?
                    .loss;
                temporal_losses.set(task, l);
            }
        }
    }
    let refine = if train.losses.refine && train.lambda_ref > 0.0 {
        let reference = clean_reference(tape, net.bindings, Some(&example.clean_audio)).in_component("refinement")?;
        Some(loss_ref(tape, pair.audio, &reference).in_component("refinement")?)
    } else {
        None
    };
    Ok(ExampleLosses {
        asr,
        temporal: temporal_losses,
        refine,
    })
}

/// Batch-mean objective node and its breakdown.
pub struct BatchObjective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Averages per-example terms and weights them into the full objective.
pub fn total_loss(tape: &mut Tape, losses: &[ExampleLosses], train: &TrainConfig) -> Result<BatchObjective> {
    if losses.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let w = 1.0 / losses.len() as f64;
    let mean = |tape: &mut Tape, vars: Vec<Var>| -> Result<Option<Var>> {
        if vars.is_empty() {
            return Ok(None);
        }
        let terms: Vec<(Var, f64)> = vars.into_iter().map(|v| (v, w)).collect();
        tape.combine(&terms).map(Some)
    };
    let asr = mean(tape, losses.iter().map(|l| l.asr).collect())?.expect("non-empty batch");
    let mut parts = TemporalLosses::default();
    for task in TemporalTask::ALL {
        if let Some(v) = mean(tape, losses.iter().filter_map(|l| l.temporal.get(task)).collect())? {
            parts.set(task, v);
        }
    }
    let refine = mean(tape, losses.iter().filter_map(|l| l.refine).collect())?;
    let temp = parts.sum(tape)?;

    let mut terms = vec![(asr, 1.0)];
    if let Some(t) = temp {
        terms.push((t, train.lambda_temp));
    }
    if let Some(r) = refine {
        terms.push((r, train.lambda_ref));
    }
    let total = tape.combine(&terms)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let mut breakdown = LossBreakdown::compose(
        tape.value(asr).item(),
        val(parts.order),
        val(parts.direction),
        val(parts.speed),
        val(refine),
        train.lambda_temp,
        train.lambda_ref,
    );
    breakdown.total = tape.value(total).item();
    Ok(BatchObjective { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{NoiseCategory, NoiseCondition, SynthWorld};

    fn small() -> (ModelConfig, SynthConfig) {
        (
            ModelConfig {
                dim: 8,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ffn_width: 16,
                predictor_hidden: 4,
                architecture: Architecture::SaCa,
            },
            SynthConfig {
                frames: 8,
                vocab: 4,
                raw_channels: 6,
                babble_clips: 4,
                ..SynthConfig::default()
            },
        )
    }

    fn example(synth: &SynthConfig, seed: u64) -> Example {
        let world = SynthWorld::new(synth.clone()).unwrap();
        world
            .example(seed, NoiseCondition::noisy(NoiseCategory::Babble, 0).unwrap(), 99)
            .unwrap()
    }

    #[test]
    fn breakdown_identity_with_default_weights() {
        let b = LossBreakdown::compose(1.0, 0.5, 0.75, 0.75, 3.0, 0.05, 0.1);
        assert_eq!(b.l_temp, 2.0);
        assert!((b.total - 1.4).abs() < 1e-15);
        let zero = LossBreakdown::compose(1.0, 0.5, 0.75, 0.75, 3.0, 0.0, 0.0);
        assert_eq!(zero.total, 1.0);
    }

    #[test]
    fn memory_is_t_by_d_and_deterministic() {
        let (mc, sc) = small();
        let model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        let ex = example(&sc, 1);
        let run = || {
            let mut tape = Tape::new();
            let b = tape.bind(&model.params, |_| false);
            let net = Net::new(&model, &b);
            let (v, a) = net.features(&mut tape, &ex, AudioMode::Normal).unwrap();
            let pair = net.enhance(&mut tape, v, a).unwrap();
            let mem = net.encode(&mut tape, &pair, AudioMode::Normal).unwrap();
            tape.value(mem).clone()
        };
        let m = run();
        assert_eq!(m.shape(), (8, 8));
        assert_eq!(m.to_le_bytes(), run().to_le_bytes());
    }

    #[test]
    fn zero_fusion_weights_make_memory_input_independent() {
        let (mc, sc) = small();
        let mut model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        model.params.insert("fusion.W".into(), Matrix::zeros(16, 8));
        let mem_for = |seed| {
            let ex = example(&sc, seed);
            let mut tape = Tape::new();
            let b = tape.bind(&model.params, |_| false);
            let net = Net::new(&model, &b);
            let (v, a) = net.features(&mut tape, &ex, AudioMode::Normal).unwrap();
            let pair = net.enhance(&mut tape, v, a).unwrap();
            let mem = net.encode(&mut tape, &pair, AudioMode::Normal).unwrap();
            tape.value(mem).clone()
        };
        assert_eq!(mem_for(1), mem_for(2));
    }

    #[test]
    fn uniform_logits_give_log_vocab_nll() {
        let (mc, sc) = small();
        let mut model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        model.params.insert("decoder.out.W".into(), Matrix::zeros(8, 6));
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, |_| false);
        let net = Net::new(&model, &b);
        let mem = tape.constant(Matrix::zeros(8, 8));
        let l = net.asr_nll(&mut tape, mem, &[0, 1, 2]).unwrap();
        assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);
        assert!(matches!(net.asr_nll(&mut tape, mem, &[4]), Err(Error::Domain(_))));
    }

    #[test]
    fn single_token_nll_matches_closed_form() {
        // V = 2, so 4 output classes; logits come from the bias alone
        let mc = ModelConfig {
            dim: 2,
            heads: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_width: 2,
            predictor_hidden: 2,
            architecture: Architecture::SaCa,
        };
        let sc = SynthConfig {
            frames: 4,
            vocab: 2,
            raw_channels: 2,
            ..SynthConfig::default()
        };
        let mut model = ToyAvsrModel::init(&mc, &sc, 3).unwrap();
        model.params.insert("decoder.out.W".into(), Matrix::zeros(2, 4));
        let bias = [0.5, -1.0, 2.0, 0.25];
        model.params.insert("decoder.out.b".into(), Matrix::from_vec(1, 4, bias.to_vec()));
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, |_| false);
        let net = Net::new(&model, &b);
        let mem = tape.constant(Matrix::zeros(4, 2));
        let l = net.asr_nll(&mut tape, mem, &[1]).unwrap();
        let lse = bias.iter().map(|z: &f64| z.exp()).sum::<f64>().ln();
        // targets: token 1 then EOS (index 3)
        let expected = ((lse - bias[1]) + (lse - bias[3])) / 2.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn decode_with_zero_budget_is_empty() {
        let (mc, sc) = small();
        let model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, |_| false);
        let net = Net::new(&model, &b);
        let mem = tape.constant(Matrix::zeros(8, 8));
        assert!(net.greedy_decode(&mut tape, mem, 0).unwrap().is_empty());
    }

    #[test]
    fn oracle_decoder_emits_gold_script() {
        // The output layer reads the position channels of the decoder
        // state, so each step deterministically picks the scripted token.
        let (mc, sc) = small();
        let mut model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        let gold = [2usize, 0, 3, 1];
        for name in ["decoder.0.self.Wo", "decoder.0.cross.Wo", "decoder.0.ffn.W2"] {
            let shape = model.params.get(name).unwrap().shape();
            model.params.insert(name.into(), Matrix::zeros(shape.0, shape.1));
        }
        model.params.insert("decoder.embed".into(), Matrix::zeros(6, 8));
        // the decoder state at step k is pe[k]; column c of the output layer
        // is aligned with the position that must emit c
        let pe = positional_encoding(gold.len() + 1, 8);
        let mut w = Matrix::zeros(8, 6);
        let mut targets = gold.to_vec();
        targets.push(model.eos());
        for (k, &c) in targets.iter().enumerate() {
            for i in 0..8 {
                w[(i, c)] += 50.0 * pe[(k, i)];
            }
        }
        model.params.insert("decoder.out.W".into(), w);
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, |_| false);
        let net = Net::new(&model, &b);
        let mem = tape.constant(Matrix::zeros(8, 8));
        let hyp = net.greedy_decode(&mut tape, mem, 10).unwrap();
        assert_eq!(hyp, gold);
    }

    #[test]
    fn video_only_ignores_audio() {
        let (mc, sc) = small();
        let model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        let mut ex = example(&sc, 4);
        let run = |ex: &Example| {
            let mut tape = Tape::new();
            let b = tape.bind(&model.params, |_| false);
            let net = Net::new(&model, &b);
            let (v, a) = net.features(&mut tape, ex, AudioMode::VideoOnly).unwrap();
            let pair = net.enhance(&mut tape, v, a).unwrap();
            let mem = net.encode(&mut tape, &pair, AudioMode::VideoOnly).unwrap();
            tape.value(mem).clone()
        };
        let before = run(&ex);
        ex.noisy_audio.samples = ex.noisy_audio.samples.map(|x| 3.0 * x + 1.0);
        assert_eq!(before, run(&ex));
    }

    #[test]
    fn disabled_terms_are_skipped() {
        let (mc, sc) = small();
        let model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        let ex = example(&sc, 2);
        let mut train = TrainConfig {
            losses: LossFlags {
                speed: false,
                ..LossFlags::all()
            },
            ..TrainConfig::default()
        };
        let temporal = TemporalConfig::default();
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, |_| true);
        let net = Net::new(&model, &b);
        let l = example_losses(&mut tape, &net, &ex, &train, &temporal, AudioMode::Normal, 1).unwrap();
        assert!(l.temporal.speed.is_none() && l.temporal.order.is_some() && l.refine.is_some());
        let obj = total_loss(&mut tape, &[l], &train).unwrap();
        let bd = obj.breakdown;
        assert_eq!(bd.l_speed, 0.0);
        assert_eq!(bd.l_temp, bd.l_order + bd.l_direction);
        assert!((bd.total - (bd.l_asr + 0.05 * bd.l_temp + 0.1 * bd.l_ref)).abs() < 1e-12);

        train.lambda_temp = 0.0;
        train.lambda_ref = 0.0;
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, |_| true);
        let net = Net::new(&model, &b);
        let l = example_losses(&mut tape, &net, &ex, &train, &temporal, AudioMode::Normal, 1).unwrap();
        let obj = total_loss(&mut tape, &[l], &train).unwrap();
        assert_eq!(obj.breakdown.total, obj.breakdown.l_asr);
    }

    #[test]
    fn freeze_split_and_prefixes() {
        let t = TrainConfig {
            steps: 60,
            ..TrainConfig::default()
        };
        assert_eq!(t.frozen_steps(), 48);
        assert!(is_frozen_in_phase_one("encoder.0.attn.Wq"));
        assert!(is_frozen_in_phase_one("frontend.audio.W"));
        assert!(!is_frozen_in_phase_one("decoder.out.W"));
        assert!(!is_frozen_in_phase_one("video.sa.Wq"));
    }

    #[test]
    fn checkpoint_layout_is_checked() {
        let (mc, sc) = small();
        let model = ToyAvsrModel::init(&mc, &sc, 1).unwrap();
        assert!(ToyAvsrModel::from_params(&mc, &sc, model.params.clone()).is_ok());
        let ca_only = ModelConfig {
            architecture: Architecture::CaOnly,
            ..mc.clone()
        };
        assert!(matches!(
            ToyAvsrModel::from_params(&ca_only, &sc, model.params.clone()),
            Err(Error::Checkpoint(_))
        ));
    }
}
