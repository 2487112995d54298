//! Run configuration: a sectioned TOML file where unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::synth::SynthConfig;
use crate::temporal::TemporalConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out utterances per grid cell.
    pub utterances: usize,
    /// Decoding budget in tokens; 0 derives it from the frame count.
    pub max_decode_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            utterances: 64,
            max_decode_len: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Row name used when comparing runs.
    pub label: String,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub temporal: TemporalConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "default".into(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            temporal: TemporalConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every field, defaults included. Validated configs always serialize.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.temporal.validate()?;
        self.temporal.validate_frames(self.synth.frames)?;
        for (key, seed) in [("train.seed", self.train.seed), ("synth.world_seed", self.synth.world_seed)] {
            if i64::try_from(seed).is_err() {
                return Err(Error::Config(format!("{key} {seed} exceeds the TOML integer range")));
            }
        }
        if self.eval.utterances == 0 {
            return Err(Error::Config("eval.utterances must be positive".into()));
        }
        Ok(())
    }

    pub fn max_decode_len(&self) -> usize {
        if self.eval.max_decode_len > 0 {
            self.eval.max_decode_len
        } else {
            self.synth.frames / self.synth.min_duration + 2
        }
    }
}
