//! Synthetic paired video/audio corpus, noise generation and front-ends.
//!
//! Both modalities render the same latent token script through their own
//! fixed random codebook. Video is smoothed over 3 frames, audio is not.
//! Both also carry a slow monotone drift along a direction orthogonal to
//! their codebook span (a stand-in for utterance-level declination), which
//! is what gives individual frames a recoverable position in time.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Matrix;

/// The evaluation SNR levels in dB.
pub const SNR_GRID_DB: [i32; 5] = [-10, -5, 0, 5, 10];
/// SNR used for every training mixture.
pub const TRAIN_SNR_DB: i32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

/// Token stream shared by both modalities of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentScript {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub vocab: usize,
}

impl LatentScript {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Token id active at each frame.
    pub fn frame_tokens(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.durations)
            .flat_map(|(&tok, &d)| std::iter::repeat_n(tok, d))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawSignal {
    pub modality: Modality,
    /// `T x C`
    pub samples: Matrix,
}

impl RawSignal {
    pub fn new(modality: Modality, samples: Matrix) -> Self {
        Self { modality, samples }
    }

    pub fn frames(&self) -> usize {
        self.samples.rows()
    }

    pub fn channels(&self) -> usize {
        self.samples.cols()
    }

    /// Mean square over all samples.
    pub fn power(&self) -> f64 {
        self.samples.mean_square()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCategory {
    Babble,
    Speech,
    Music,
    Natural,
}

impl NoiseCategory {
    pub const ALL: [NoiseCategory; 4] = [
        NoiseCategory::Babble,
        NoiseCategory::Speech,
        NoiseCategory::Music,
        NoiseCategory::Natural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseCategory::Babble => "babble",
            NoiseCategory::Speech => "speech",
            NoiseCategory::Music => "music",
            NoiseCategory::Natural => "natural",
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "babble" => Ok(NoiseCategory::Babble),
            "speech" => Ok(NoiseCategory::Speech),
            "music" => Ok(NoiseCategory::Music),
            "natural" => Ok(NoiseCategory::Natural),
            other => Err(Error::Config(format!("unknown noise category `{other}`"))),
        }
    }
}

/// One cell of the evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseCondition {
    Clean,
    Noisy { category: NoiseCategory, snr_db: i32 },
}

impl NoiseCondition {
    /// Rejects SNRs outside [`SNR_GRID_DB`].
    pub fn noisy(category: NoiseCategory, snr_db: i32) -> Result<Self> {
        if !SNR_GRID_DB.contains(&snr_db) {
            return Err(Error::Config(format!(
                "SNR {snr_db} dB is not on the grid {SNR_GRID_DB:?}"
            )));
        }
        Ok(NoiseCondition::Noisy { category, snr_db })
    }

    /// The 4 x 5 noisy grid, category-major.
    pub fn noisy_grid() -> Vec<NoiseCondition> {
        NoiseCategory::ALL
            .iter()
            .flat_map(|&category| {
                SNR_GRID_DB
                    .iter()
                    .map(move |&snr_db| NoiseCondition::Noisy { category, snr_db })
            })
            .collect()
    }

    /// The noisy grid followed by the clean cell.
    pub fn full_grid() -> Vec<NoiseCondition> {
        let mut g = Self::noisy_grid();
        g.push(NoiseCondition::Clean);
        g
    }

    pub fn category(&self) -> Option<NoiseCategory> {
        match self {
            NoiseCondition::Clean => None,
            NoiseCondition::Noisy { category, .. } => Some(*category),
        }
    }

    pub fn snr_db(&self) -> Option<i32> {
        match self {
            NoiseCondition::Clean => None,
            NoiseCondition::Noisy { snr_db, .. } => Some(*snr_db),
        }
    }
}

impl fmt::Display for NoiseCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseCondition::Clean => f.write_str("clean"),
            NoiseCondition::Noisy { category, snr_db } => write!(f, "{category}@{snr_db}"),
        }
    }
}

impl FromStr for NoiseCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "clean" {
            return Ok(NoiseCondition::Clean);
        }
        let (cat, snr) = s
            .split_once('@')
            .ok_or_else(|| Error::Config(format!("bad noise condition `{s}`")))?;
        let snr: i32 = snr
            .parse()
            .map_err(|_| Error::Config(format!("bad SNR in `{s}`")))?;
        NoiseCondition::noisy(cat.parse()?, snr)
    }
}

/// Disjoint seed namespaces. Seeds are `tag << 56 | index`, so two spaces
/// never produce the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedSpace {
    TrainUtterance = 1,
    EvalUtterance = 2,
    TrainNoise = 3,
    EvalNoise = 4,
}

impl SeedSpace {
    pub fn seed(self, index: u64) -> u64 {
        ((self as u64) << 56) | (index & ((1 << 56) - 1))
    }

    pub fn of(seed: u64) -> Option<SeedSpace> {
        match seed >> 56 {
            1 => Some(SeedSpace::TrainUtterance),
            2 => Some(SeedSpace::EvalUtterance),
            3 => Some(SeedSpace::TrainNoise),
            4 => Some(SeedSpace::EvalNoise),
            _ => None,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `T`
    pub frames: usize,
    /// `V`
    pub vocab: usize,
    /// `C`, raw channels per modality
    pub raw_channels: usize,
    /// Peak magnitude of the temporal drift component.
    pub drift_amplitude: f64,
    /// Per-sample Gaussian jitter.
    pub jitter_std: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Clips averaged into one babble signal.
    pub babble_clips: usize,
    /// Seed of the fixed codebooks and drift directions.
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            vocab: 16,
            raw_channels: 24,
            drift_amplitude: 6.0,
            jitter_std: 0.05,
            min_duration: 2,
            max_duration: 4,
            babble_clips: 30,
            world_seed: 0x5eed,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::Config(format!(
                "sequence length {} is below the minimum of 4",
                self.frames
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocabulary {} is below 2", self.vocab)));
        }
        if self.raw_channels == 0 {
            return Err(Error::Config("raw_channels must be positive".into()));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::Config(format!(
                "token durations {}..={} are invalid",
                self.min_duration, self.max_duration
            )));
        }
        if self.babble_clips < 2 {
            return Err(Error::Config("babble needs at least 2 clips".into()));
        }
        if self.jitter_std.is_nan() || self.jitter_std < 0.0 || !self.drift_amplitude.is_finite() {
            return Err(Error::Config("jitter and drift must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Video, clean audio and script of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub video: RawSignal,
    pub audio: RawSignal,
    pub script: LatentScript,
}

/// A training or evaluation example: a pair plus its noisy audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seed: u64,
    pub condition: NoiseCondition,
    pub script: LatentScript,
    pub video: RawSignal,
    pub clean_audio: RawSignal,
    pub noisy_audio: RawSignal,
}

/// Fixed codebooks and drift directions shared by every utterance.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    cfg: SynthConfig,
    video_codebook: Matrix,
    audio_codebook: Matrix,
    video_drift: Vec<f64>,
    audio_drift: Vec<f64>,
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.world_seed, 0xC0DE);
        let video_codebook = Matrix::randn(cfg.vocab, cfg.raw_channels, 1.0, &mut rng);
        let audio_codebook = Matrix::randn(cfg.vocab, cfg.raw_channels, 1.0, &mut rng);
        let video_drift = drift_direction(&video_codebook, &mut rng);
        let audio_drift = drift_direction(&audio_codebook, &mut rng);
        Ok(Self {
            cfg,
            video_codebook,
            audio_codebook,
            video_drift,
            audio_drift,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn script(&self, seed: u64) -> LatentScript {
        let mut rng = rng_for(seed, 1);
        let (t, v) = (self.cfg.frames, self.cfg.vocab);
        let mut tokens = Vec::new();
        let mut durations = Vec::new();
        let mut used = 0;
        while used < t {
            let mut tok = rng.gen_range(0..v);
            // adjacent repeats would be indistinguishable from one long token
            while tokens.last() == Some(&tok) {
                tok = rng.gen_range(0..v);
            }
            let d = rng
                .gen_range(self.cfg.min_duration..=self.cfg.max_duration)
                .min(t - used);
            tokens.push(tok);
            durations.push(d);
            used += d;
        }
        LatentScript {
            tokens,
            durations,
            vocab: v,
        }
    }

    /// Deterministic pair for `seed`.
    pub fn synth_pair(&self, seed: u64) -> SyntheticPair {
        let script = self.script(seed);
        let frame_tokens = script.frame_tokens();
        let mut rng = rng_for(seed, 2);
        let video = self.render(&frame_tokens, Modality::Video, &mut rng);
        let audio = self.render(&frame_tokens, Modality::Audio, &mut rng);
        SyntheticPair { video, audio, script }
    }

    fn render(&self, frame_tokens: &[usize], modality: Modality, rng: &mut ChaCha8Rng) -> RawSignal {
        let (codebook, drift) = match modality {
            Modality::Video => (&self.video_codebook, &self.video_drift),
            Modality::Audio => (&self.audio_codebook, &self.audio_drift),
        };
        let t = frame_tokens.len();
        let c = self.cfg.raw_channels;
        let mut base = Matrix::zeros(t, c);
        for (f, &tok) in frame_tokens.iter().enumerate() {
            base.row_mut(f).copy_from_slice(codebook.row(tok));
        }
        let mut out = match modality {
            Modality::Video => moving_average3(&base),
            Modality::Audio => base,
        };
        for f in 0..t {
            let level = self.cfg.drift_amplitude * drift_level(f, t);
            for (ch, x) in out.row_mut(f).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *x += level * drift[ch] + self.cfg.jitter_std * z;
            }
        }
        RawSignal::new(modality, out)
    }

    /// Noise signal of one category, `T` frames long.
    pub fn noise(&self, category: NoiseCategory, noise_seed: u64) -> Result<RawSignal> {
        let (t, c) = (self.cfg.frames, self.cfg.raw_channels);
        let mut rng = rng_for(noise_seed, 3);
        let samples = match category {
            NoiseCategory::Babble => {
                let m = self.cfg.babble_clips;
                let clips: Vec<RawSignal> = (0..m as u64)
                    .map(|k| self.synth_pair(derive_seed(noise_seed, 100 + k)).audio)
                    .collect();
                return synth_babble(&clips, m, derive_seed(noise_seed, 99));
            }
            NoiseCategory::Speech => return Ok(self.synth_pair(derive_seed(noise_seed, 100)).audio),
            NoiseCategory::Music => {
                let mut out = Matrix::zeros(t, c);
                for _ in 0..3 {
                    let freq: f64 = rng.gen_range(0.03..0.45);
                    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let mix = Matrix::randn(1, c, 1.0, &mut rng);
                    for f in 0..t {
                        let s = (std::f64::consts::TAU * freq * f as f64 + phase).sin();
                        for (o, w) in out.row_mut(f).iter_mut().zip(mix.as_slice()) {
                            *o += s * w;
                        }
                    }
                }
                out
            }
            NoiseCategory::Natural => {
                // sum of AR(1) processes with spread-out poles: roughly 1/f
                let poles = [0.5, 0.8, 0.95];
                let mut out = Matrix::zeros(t, c);
                for ch in 0..c {
                    for &p in &poles {
                        let gain = (1.0f64 - p * p).sqrt();
                        let mut y: f64 = StandardNormal.sample(&mut rng);
                        for f in 0..t {
                            let w: f64 = StandardNormal.sample(&mut rng);
                            y = p * y + gain * w;
                            out[(f, ch)] += y;
                        }
                    }
                }
                out
            }
        };
        Ok(RawSignal::new(Modality::Audio, samples))
    }

    /// Full example for an utterance seed under `condition`.
    pub fn example(&self, seed: u64, condition: NoiseCondition, noise_seed: u64) -> Result<Example> {
        let pair = self.synth_pair(seed);
        let noisy_audio = match condition {
            NoiseCondition::Clean => pair.audio.clone(),
            NoiseCondition::Noisy { category, snr_db } => {
                let noise = self.noise(category, noise_seed)?;
                mix_noise_at_snr(&pair.audio, &noise, snr_db as f64)?
            }
        };
        Ok(Example {
            seed,
            condition,
            script: pair.script,
            video: pair.video,
            clean_audio: pair.audio,
            noisy_audio,
        })
    }
}

fn drift_level(frame: usize, frames: usize) -> f64 {
    if frames <= 1 {
        return 0.0;
    }
    2.0 * frame as f64 / (frames - 1) as f64 - 1.0
}

/// Random unit vector orthogonal to the row span of `codebook` (or just a
/// random unit vector when the codebook spans everything).
fn drift_direction(codebook: &Matrix, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = codebook.cols();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in 0..codebook.rows() {
        let mut v = codebook.row(r).to_vec();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut dir: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
    if basis.len() < c {
        for b in &basis {
            let dot: f64 = dir.iter().zip(b).map(|(x, y)| x * y).sum();
            dir.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.into_iter().map(|x| x / norm).collect()
}

/// Centered moving average of width 3, shrinking at the edges.
fn moving_average3(x: &Matrix) -> Matrix {
    let (t, c) = x.shape();
    let mut out = Matrix::zeros(t, c);
    for f in 0..t {
        let lo = f.saturating_sub(1);
        let hi = (f + 1).min(t - 1);
        let n = (hi - lo + 1) as f64;
        for src in lo..=hi {
            for (o, v) in out.row_mut(f).iter_mut().zip(x.row(src)) {
                *o += v / n;
            }
        }
    }
    out
}

/// Pair generation with the default world at the given scale.
pub fn synth_pair(seed: u64, frames: usize, vocab: usize) -> Result<SyntheticPair> {
    let world = SynthWorld::new(SynthConfig {
        frames,
        vocab,
        ..SynthConfig::default()
    })?;
    Ok(world.synth_pair(seed))
}

/// Repeats or crops `noise` to `frames` rows.
pub fn fit_length(noise: &RawSignal, frames: usize) -> RawSignal {
    let n = noise.frames();
    let mut out = Matrix::zeros(frames, noise.channels());
    if n > 0 {
        for f in 0..frames {
            out.row_mut(f).copy_from_slice(noise.samples.row(f % n));
        }
    }
    RawSignal::new(noise.modality, out)
}

/// Gain `alpha` such that `alpha * noise` sits `snr_db` below `clean`.
pub fn snr_scale(clean: &RawSignal, noise: &RawSignal, snr_db: f64) -> Result<f64> {
    let pc = clean.power();
    let pn = noise.power();
    if pc.is_nan() || pc <= 0.0 {
        return Err(Error::DegenerateSignal("clean signal has zero power".into()));
    }
    if pn.is_nan() || pn <= 0.0 {
        return Err(Error::DegenerateSignal("noise signal has zero power".into()));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + alpha * noise` at exactly `snr_db`. The noise is tiled or
/// cropped to the clean length first.
pub fn mix_noise_at_snr(clean: &RawSignal, noise: &RawSignal, snr_db: f64) -> Result<RawSignal> {
    if noise.channels() != clean.channels() {
        return Err(Error::dim(
            "mix_noise_at_snr",
            format!("{} noise channels vs {} clean", noise.channels(), clean.channels()),
        ));
    }
    let noise = fit_length(noise, clean.frames());
    let alpha = snr_scale(clean, &noise, snr_db)?;
    let mut out = clean.samples.clone();
    out.scaled_add_assign(alpha, &noise.samples);
    Ok(RawSignal::new(clean.modality, out))
}

/// `10 log10(P_clean / P_noise)`
pub fn measured_snr_db(clean: &RawSignal, noise: &Matrix) -> f64 {
    10.0 * (clean.power() / noise.mean_square()).log10()
}

/// Element-wise mean of `m` clips chosen at random from `clips`, each
/// fitted to the length of the first chosen clip.
pub fn synth_babble(clips: &[RawSignal], m: usize, seed: u64) -> Result<RawSignal> {
    if m < 2 {
        return Err(Error::Config(format!("babble needs m >= 2, got {m}")));
    }
    if clips.len() < m {
        return Err(Error::Config(format!(
            "babble needs {m} clips, only {} available",
            clips.len()
        )));
    }
    let mut rng = rng_for(seed, 4);
    let mut chosen = sample(&mut rng, clips.len(), m).into_vec();
    chosen.sort_unstable();
    let frames = clips[chosen[0]].frames();
    let channels = clips[chosen[0]].channels();
    let mut out = Matrix::zeros(frames, channels);
    for &i in &chosen {
        if clips[i].channels() != channels {
            return Err(Error::dim("synth_babble", "clips differ in channel count"));
        }
        out.scaled_add_assign(1.0 / m as f64, &fit_length(&clips[i], frames).samples);
    }
    Ok(RawSignal::new(Modality::Audio, out))
}

/// Parameter names of a modality's front-end.
pub fn front_end_names(modality: Modality) -> (String, String) {
    let m = modality.as_str();
    (format!("frontend.{m}.W"), format!("frontend.{m}.b"))
}

/// Per-modality affine projection `C -> D`.
#[derive(Clone, Debug)]
pub struct FrontEndParams {
    pub modality: Modality,
    pub weight: Matrix,
    pub bias: Matrix,
}

impl FrontEndParams {
    pub fn init<R: Rng + ?Sized>(modality: Modality, channels: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            modality,
            weight: Matrix::randn(channels, dim, 1.0 / (channels as f64).sqrt(), rng),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore) {
        let (w, b) = front_end_names(self.modality);
        store.insert(w, self.weight);
        store.insert(b, self.bias);
    }
}

/// Projects a raw signal to `T x D` features on the tape.
pub fn front_end(tape: &mut Tape, bindings: &Bindings, signal: &RawSignal) -> Result<Var> {
    let (w, b) = front_end_names(signal.modality);
    let (w, b) = (bindings.get(&w)?, bindings.get(&b)?);
    if tape.shape(w).0 != signal.channels() {
        return Err(Error::dim(
            "front_end",
            format!(
                "{} raw channels for a front-end expecting {}",
                signal.channels(),
                tape.shape(w).0
            ),
        ));
    }
    let x = tape.constant(signal.samples.clone());
    let proj = tape.matmul(x, w)?;
    tape.add_row(proj, b)
}

const DATASET_MAGIC: &[u8; 4] = b"AVSD";
const DATASET_VERSION: u32 = 1;

/// Writes `T x D` matrices back to back after a 16-byte header
/// (magic, version, T, D; little-endian u32s after the magic).
pub fn write_dataset(path: &Path, matrices: &[Matrix]) -> Result<()> {
    let (t, d) = matrices.first().map_or((0, 0), Matrix::shape);
    let mut buf = Vec::with_capacity(16 + matrices.len() * t * d * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for m in matrices {
        if m.shape() != (t, d) {
            return Err(Error::Dataset(format!(
                "matrix {:?} in a {t}x{d} split",
                m.shape()
            )));
        }
        buf.extend_from_slice(&m.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Matrix>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Dataset("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let version = word(4) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!("unsupported version {version}")));
    }
    let (t, d) = (word(8), word(12));
    let body = &bytes[16..];
    let per = t * d * 8;
    if per == 0 {
        return if body.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Dataset("payload in an empty split".into()))
        };
    }
    if body.len() % per != 0 {
        return Err(Error::Dataset("truncated matrix payload".into()));
    }
    Ok(body
        .chunks_exact(per)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Matrix::from_vec(t, d, data)
        })
        .collect())
}

/// One `seed category snr_db` line per example (`clean -` for clean).
pub fn write_manifest(path: &Path, entries: &[(u64, NoiseCondition)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (seed, cond) in entries {
        match cond {
            NoiseCondition::Clean => writeln!(f, "{seed} clean -")?,
            NoiseCondition::Noisy { category, snr_db } => writeln!(f, "{seed} {category} {snr_db}")?,
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(u64, NoiseCondition)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Dataset(format!("manifest line {}: `{line}`", lineno + 1));
        let mut parts = line.split_whitespace();
        let seed: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let cat = parts.next().ok_or_else(bad)?;
        let snr = parts.next().ok_or_else(bad)?;
        let cond = if cat == "clean" {
            NoiseCondition::Clean
        } else {
            NoiseCondition::noisy(cat.parse()?, snr.parse().map_err(|_| bad())?)?
        };
        out.push((seed, cond));
    }
    Ok(out)
}
