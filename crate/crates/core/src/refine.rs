//! Audio refinement objective: refined noisy-audio features are pulled
//! toward the front-end features of the clean recording.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Bindings;
use crate::synth::{front_end, Modality, RawSignal};

/// Detached clean-audio features. Never passes through the stacks.
#[derive(Clone, Copy, Debug)]
pub struct CleanReference {
    pub features: Var,
}

/// Audio front-end applied to the clean signal, then detached.
pub fn clean_reference(tape: &mut Tape, bindings: &Bindings, clean: Option<&RawSignal>) -> Result<CleanReference> {
    let clean = clean.ok_or_else(|| Error::Pairing("no clean audio for the refinement target".into()))?;
    if clean.modality != Modality::Audio {
        return Err(Error::Pairing("refinement target must be audio".into()));
    }
    let f = front_end(tape, bindings, clean)?;
    Ok(CleanReference {
        features: tape.stop_gradient(f)?,
    })
}

/// Mean squared error between refined audio and the clean reference.
pub fn loss_ref(tape: &mut Tape, refined_audio: Var, reference: &CleanReference) -> Result<Var> {
    tape.mse(refined_audio, reference.features)
}
