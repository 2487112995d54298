//! Self- and cross-modal attention stacks for the two streamlines.
//!
//! Audio is refined first, attending to the video features; video is then
//! enhanced by attending to the refined audio. Each cross-modal key/value
//! input goes through `stop_gradient`, so a loss on one streamline never
//! reaches the other streamline's parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::synth::Modality;
use crate::tensor::Matrix;

/// Layout of each streamline's attention stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Self-attention, then cross-modal attention.
    #[default]
    #[serde(rename = "sa+ca")]
    SaCa,
    /// Cross-modal attention queried directly by the raw features.
    #[serde(rename = "ca-only")]
    CaOnly,
    /// Self-attention with a residual, no cross-modal exchange.
    #[serde(rename = "sa-only")]
    SaOnly,
    /// Two stacked self-attentions, no cross-modal exchange.
    #[serde(rename = "sa+sa")]
    SaSa,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::SaCa,
        Architecture::CaOnly,
        Architecture::SaOnly,
        Architecture::SaSa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::SaCa => "sa+ca",
            Architecture::CaOnly => "ca-only",
            Architecture::SaOnly => "sa-only",
            Architecture::SaSa => "sa+sa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub dim: usize,
    pub heads: usize,
    pub architecture: Architecture,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Names of one attention's projections under `prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionNames {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    /// Output projection (`Wfc1`..`Wfc4` in the stacks).
    pub wfc: String,
}

impl AttentionNames {
    fn new(prefix: &str, fc: &str) -> Self {
        Self {
            wq: format!("{prefix}.Wq"),
            wk: format!("{prefix}.Wk"),
            wv: format!("{prefix}.Wv"),
            wfc: format!("{prefix}.{fc}"),
        }
    }

    fn all(&self) -> [&str; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wfc]
    }
}

/// Self-attention and second-block names for one streamline.
pub fn streamline_names(modality: Modality, architecture: Architecture) -> Vec<AttentionNames> {
    let m = modality.as_str();
    let (fc_sa, fc_ca) = match modality {
        Modality::Video => ("Wfc1", "Wfc2"),
        Modality::Audio => ("Wfc3", "Wfc4"),
    };
    match architecture {
        Architecture::SaCa => vec![
            AttentionNames::new(&format!("{m}.sa"), fc_sa),
            AttentionNames::new(&format!("{m}.ca"), fc_ca),
        ],
        Architecture::CaOnly => vec![AttentionNames::new(&format!("{m}.ca"), fc_ca)],
        Architecture::SaOnly => vec![AttentionNames::new(&format!("{m}.sa"), fc_sa)],
        Architecture::SaSa => vec![
            AttentionNames::new(&format!("{m}.sa"), fc_sa),
            AttentionNames::new(&format!("{m}.sa2"), fc_ca),
        ],
    }
}

/// Name of the output projection whose zeroing makes a streamline the
/// identity (`Wfc2` for video, `Wfc4` for audio, `Wfc1`/`Wfc3` for sa-only).
pub fn residual_projection(modality: Modality, architecture: Architecture) -> String {
    streamline_names(modality, architecture)
        .pop()
        .expect("every architecture has a block")
        .wfc
}

/// Random initialization of both streamlines. Residual output projections
/// start small so the untrained stacks are close to the identity.
pub fn init_stacks<R: Rng + ?Sized>(cfg: &StackConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let std = 1.0 / (d as f64).sqrt();
    for modality in [Modality::Video, Modality::Audio] {
        let residual = residual_projection(modality, cfg.architecture);
        for names in streamline_names(modality, cfg.architecture) {
            for name in names.all() {
                let scale = if name == residual { 0.1 * std } else { std };
                store.insert(name.to_string(), Matrix::randn(d, d, scale, rng));
            }
        }
    }
    Ok(())
}

/// Tape handles of one attention's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl AttentionVars {
    pub fn bind(bindings: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: bindings.get(&format!("{prefix}.Wq"))?,
            wk: bindings.get(&format!("{prefix}.Wk"))?,
            wv: bindings.get(&format!("{prefix}.Wv"))?,
        })
    }
}

/// Attention output plus each head's probability matrix.
pub struct AttentionTrace {
    pub output: Var,
    pub probabilities: Vec<Var>,
}

/// Multi-head scaled dot-product attention with optional causal masking.
pub fn attention_traced(
    tape: &mut Tape,
    q_seq: Var,
    kv_seq: Var,
    w: &AttentionVars,
    heads: usize,
    causal: bool,
) -> Result<AttentionTrace> {
    let d = tape.shape(w.wq).0;
    for (what, v) in [("query", q_seq), ("key/value", kv_seq)] {
        let (rows, cols) = tape.shape(v);
        if cols != d {
            return Err(Error::dim(
                "multi_head_attention",
                format!("{what} width {cols} vs projection width {d}"),
            ));
        }
        if rows == 0 {
            return Err(Error::dim("multi_head_attention", format!("empty {what} sequence")));
        }
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let q = tape.matmul(q_seq, w.wq)?;
    let k = tape.matmul(kv_seq, w.wk)?;
    let v = tape.matmul(kv_seq, w.wv)?;
    let width = d / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probabilities = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * width, width)?,
                tape.slice_cols(k, h * width, width)?,
                tape.slice_cols(v, h * width, width)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let p = if causal {
            tape.softmax_rows_causal(scores)?
        } else {
            tape.softmax_rows(scores)?
        };
        outs.push(tape.matmul(p, vh)?);
        probabilities.push(p);
    }
    let output = if heads == 1 { outs[0] } else { tape.concat_channels(&outs)? };
    Ok(AttentionTrace { output, probabilities })
}

/// Unmasked multi-head attention of `q_seq` over `kv_seq`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_seq: Var,
    kv_seq: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    Ok(attention_traced(tape, q_seq, kv_seq, w, heads, false)?.output)
}

fn attend_project(
    tape: &mut Tape,
    bindings: &Bindings,
    names: &AttentionNames,
    query: Var,
    kv: Var,
    heads: usize,
) -> Result<Var> {
    let w = AttentionVars {
        wq: bindings.get(&names.wq)?,
        wk: bindings.get(&names.wk)?,
        wv: bindings.get(&names.wv)?,
    };
    let att = multi_head_attention(tape, query, kv, &w, heads)?;
    tape.matmul(att, bindings.get(&names.wfc)?)
}

/// `SA(f) * Wfc`, without a residual.
pub fn sa_block(tape: &mut Tape, bindings: &Bindings, names: &AttentionNames, f: Var, heads: usize) -> Result<Var> {
    attend_project(tape, bindings, names, f, f, heads)
}

fn check_paired(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.0 != sb.0 {
        return Err(Error::Pairing(format!(
            "video and audio lengths differ: {} vs {}",
            sa.0, sb.0
        )));
    }
    if sa.1 != sb.1 {
        return Err(Error::dim("stacked_forward", format!("widths {} vs {}", sa.1, sb.1)));
    }
    Ok(())
}

/// One streamline: `own` enhanced using the (gradient-blocked) `other`.
fn streamline(
    tape: &mut Tape,
    bindings: &Bindings,
    cfg: &StackConfig,
    modality: Modality,
    own: Var,
    other: Var,
) -> Result<Var> {
    check_paired(tape, own, other)?;
    let names = streamline_names(modality, cfg.architecture);
    let h = cfg.heads;
    let delta = match cfg.architecture {
        Architecture::SaCa => {
            let prepared = sa_block(tape, bindings, &names[0], own, h)?;
            let blocked = tape.stop_gradient(other)?;
            attend_project(tape, bindings, &names[1], prepared, blocked, h)?
        }
        Architecture::CaOnly => {
            let blocked = tape.stop_gradient(other)?;
            attend_project(tape, bindings, &names[0], own, blocked, h)?
        }
        Architecture::SaOnly => sa_block(tape, bindings, &names[0], own, h)?,
        Architecture::SaSa => {
            let prepared = sa_block(tape, bindings, &names[0], own, h)?;
            sa_block(tape, bindings, &names[1], prepared, h)?
        }
    };
    tape.add(own, delta)
}

/// Refined audio: `f_a + CA(SA(f_a) Wfc3; f_v) Wfc4`.
pub fn v2a_refine(tape: &mut Tape, bindings: &Bindings, cfg: &StackConfig, f_a: Var, f_v: Var) -> Result<Var> {
    streamline(tape, bindings, cfg, Modality::Audio, f_a, f_v)
}

/// Enhanced video: `f_v + CA(SA(f_v) Wfc1; refined audio) Wfc2`.
pub fn a2v_enhance(
    tape: &mut Tape,
    bindings: &Bindings,
    cfg: &StackConfig,
    f_v: Var,
    refined_audio: Var,
) -> Result<Var> {
    streamline(tape, bindings, cfg, Modality::Video, f_v, refined_audio)
}

#[derive(Clone, Copy, Debug)]
pub struct EnhancedPair {
    pub video: Var,
    pub audio: Var,
}

/// Audio refinement, then video enhancement against the refined audio.
pub fn stacked_forward(
    tape: &mut Tape,
    bindings: &Bindings,
    cfg: &StackConfig,
    f_v: Var,
    f_a: Var,
) -> Result<EnhancedPair> {
    let audio = v2a_refine(tape, bindings, cfg, f_a, f_v)?;
    let video = a2v_enhance(tape, bindings, cfg, f_v, audio)?;
    Ok(EnhancedPair { video, audio })
}

/// Number of scalar parameters in both streamlines.
pub fn stack_parameter_count(store: &ParamStore) -> usize {
    store.count_prefix("video.") + store.count_prefix("audio.")
}
