//! C interface to the avsr toolkit.
//!
//! Every fallible function returns an [`AvsrStatus`]; on failure the
//! calling thread's message is available from [`avsr_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use avsr_core::checkpoint;
use avsr_core::config::RunConfig;
use avsr_core::metrics::{nwer, nwer_noise_dominant, wer, EvalTable};
use avsr_core::synth::{mix_noise_at_snr, Modality, NoiseCategory, RawSignal, SNR_GRID_DB};
use avsr_core::tensor::Matrix;
use avsr_core::train::Trainer;
use avsr_core::Error;

/// Number of noisy grid cells: four categories times five SNR levels.
pub const AVSR_GRID_CELLS: usize = 20;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AvsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// One optimizer step's losses.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AvsrStepReport {
    pub step: usize,
    pub frozen: bool,
    pub grad_norm: f64,
    pub total: f64,
    pub l_asr: f64,
    pub l_order: f64,
    pub l_direction: f64,
    pub l_speed: f64,
    pub l_temp: f64,
    pub l_ref: f64,
}

/// Named matrices loaded from a checkpoint file.
pub struct AvsrCheckpoint {
    names: Vec<CString>,
    matrices: Vec<Matrix>,
}

/// A training run in progress.
pub struct AvsrTrainer {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: AvsrStatus,
    message: String,
}

impl Failure {
    fn null(what: &str) -> Self {
        Self {
            status: AvsrStatus::NullArgument,
            message: format!("{what} is null"),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self {
            status: AvsrStatus::InvalidArgument,
            message: message.into(),
        }
    }
}

fn status_of(e: &Error) -> AvsrStatus {
    match e {
        Error::Config(_) => AvsrStatus::Config,
        Error::NonFinite { .. } => AvsrStatus::Numeric,
        Error::Io(_) => AvsrStatus::Io,
        Error::Checkpoint(_) => AvsrStatus::Checkpoint,
        Error::Component { source, .. } => status_of(source),
        _ => AvsrStatus::InvalidArgument,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            status: status_of(&e),
            message: e.to_string(),
        }
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AvsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvsrStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(failure.message);
            failure.status
        }
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {detail}"));
            AvsrStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(Failure::null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure::invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn avsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Token error rate in percent. The reference must be non-empty.
///
/// # Safety
/// `reference` and `hypothesis` point to at least the given number of
/// tokens (either may be NULL when its length is 0); `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn avsr_wer(
    reference: *const u32,
    reference_len: usize,
    hypothesis: *const u32,
    hypothesis_len: usize,
    out: *mut f64,
) -> AvsrStatus {
    guard(|| {
        let r = slice(reference, reference_len, "reference")?;
        let h = slice(hypothesis, hypothesis_len, "hypothesis")?;
        let out = out_ref(out, "out")?;
        *out = wer(r, h)?;
        Ok(())
    })
}

/// N-WER over all cells and over the cells at or below 0 dB.
///
/// `cells` holds [`AVSR_GRID_CELLS`] values, category-major in the order
/// babble, speech, music, natural, each over SNR -10, -5, 0, 5, 10 dB.
///
/// # Safety
/// `cells` points to [`AVSR_GRID_CELLS`] doubles; both outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn avsr_nwer(
    cells: *const f64,
    out_nwer: *mut f64,
    out_noise_dominant: *mut f64,
) -> AvsrStatus {
    guard(|| {
        let cells = slice(cells, AVSR_GRID_CELLS, "cells")?;
        let per = SNR_GRID_DB.len();
        let rows: Vec<(NoiseCategory, [f64; 5])> = NoiseCategory::ALL
            .iter()
            .zip(cells.chunks_exact(per))
            .map(|(&cat, chunk)| (cat, chunk.try_into().expect("five SNR levels")))
            .collect();
        let table = EvalTable::from_rows(&rows);
        let (n, nd) = (nwer(&table)?, nwer_noise_dominant(&table)?);
        *out_ref(out_nwer, "out_nwer")? = n;
        *out_ref(out_noise_dominant, "out_noise_dominant")? = nd;
        Ok(())
    })
}

/// Writes `clean + alpha * noise` with `alpha` chosen for exactly `snr_db`.
/// Signals are row-major `frames x channels`; the noise is tiled or cropped
/// to the clean length.
///
/// # Safety
/// `clean` and `out` hold `frames * channels` doubles and `noise` holds
/// `noise_frames * channels`.
#[no_mangle]
pub unsafe extern "C" fn avsr_mix_noise_at_snr(
    clean: *const f64,
    frames: usize,
    channels: usize,
    noise: *const f64,
    noise_frames: usize,
    snr_db: f64,
    out: *mut f64,
) -> AvsrStatus {
    guard(|| {
        if frames == 0 || channels == 0 || noise_frames == 0 {
            return Err(Failure::invalid("signals must be non-empty"));
        }
        let len = frames
            .checked_mul(channels)
            .ok_or_else(|| Failure::invalid("signal size overflows"))?;
        let noise_len = noise_frames
            .checked_mul(channels)
            .ok_or_else(|| Failure::invalid("noise size overflows"))?;
        let clean = RawSignal::new(
            Modality::Audio,
            Matrix::from_vec(frames, channels, slice(clean, len, "clean")?.to_vec()),
        );
        let noise = RawSignal::new(
            Modality::Audio,
            Matrix::from_vec(noise_frames, channels, slice(noise, noise_len, "noise")?.to_vec()),
        );
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let mixed = mix_noise_at_snr(&clean, &noise, snr_db)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(mixed.samples.as_slice());
        Ok(())
    })
}

/// Loads a checkpoint file into a new handle.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn avsr_checkpoint_open(path: *const c_char, out: *mut *mut AvsrCheckpoint) -> AvsrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let store = checkpoint::load(&path_arg(path)?)?;
        let mut names = Vec::with_capacity(store.len());
        let mut matrices = Vec::with_capacity(store.len());
        for (name, m) in store.iter() {
            names.push(CString::new(name).map_err(|_| Failure::invalid("parameter name contains NUL"))?);
            matrices.push(m.clone());
        }
        *out = Box::into_raw(Box::new(AvsrCheckpoint { names, matrices }));
        Ok(())
    })
}

/// Number of matrices; 0 for NULL.
///
/// # Safety
/// `handle` is NULL or came from [`avsr_checkpoint_open`].
#[no_mangle]
pub unsafe extern "C" fn avsr_checkpoint_len(handle: *const AvsrCheckpoint) -> usize {
    handle.as_ref().map_or(0, |h| h.matrices.len())
}

/// Name of matrix `index`, or NULL when out of range. Owned by the handle.
///
/// # Safety
/// `handle` is NULL or came from [`avsr_checkpoint_open`].
#[no_mangle]
pub unsafe extern "C" fn avsr_checkpoint_name(handle: *const AvsrCheckpoint, index: usize) -> *const c_char {
    handle
        .as_ref()
        .and_then(|h| h.names.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Shape of matrix `index`.
///
/// # Safety
/// `handle` is NULL or came from [`avsr_checkpoint_open`]; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn avsr_checkpoint_shape(
    handle: *const AvsrCheckpoint,
    index: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> AvsrStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| Failure::null("handle"))?;
        let m = h
            .matrices
            .get(index)
            .ok_or_else(|| Failure::invalid(format!("index {index} out of range")))?;
        *out_ref(rows, "rows")? = m.rows();
        *out_ref(cols, "cols")? = m.cols();
        Ok(())
    })
}

/// Row-major values of matrix `index`, or NULL when out of range. Owned by
/// the handle.
///
/// # Safety
/// `handle` is NULL or came from [`avsr_checkpoint_open`].
#[no_mangle]
pub unsafe extern "C" fn avsr_checkpoint_data(handle: *const AvsrCheckpoint, index: usize) -> *const f64 {
    handle
        .as_ref()
        .and_then(|h| h.matrices.get(index))
        .map_or(ptr::null(), |m| m.as_slice().as_ptr())
}

/// # Safety
/// `handle` is NULL or came from [`avsr_checkpoint_open`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn avsr_checkpoint_free(handle: *mut AvsrCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Creates a trainer from TOML configuration text; keys left out take
/// their defaults.
///
/// # Safety
/// `config_toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn avsr_trainer_new(config_toml: *const c_char, out: *mut *mut AvsrTrainer) -> AvsrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if config_toml.is_null() {
            return Err(Failure::null("config_toml"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| Failure::invalid("config is not valid UTF-8"))?;
        let trainer = Trainer::new(RunConfig::parse(text)?)?;
        *out = Box::into_raw(Box::new(AvsrTrainer { trainer }));
        Ok(())
    })
}

/// Runs one optimizer step and reports its losses.
///
/// # Safety
/// `handle` came from [`avsr_trainer_new`]; `out` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn avsr_trainer_step(handle: *mut AvsrTrainer, out: *mut AvsrStepReport) -> AvsrStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| Failure::null("handle"))?;
        let r = h.trainer.train_step()?;
        if let Some(out) = out.as_mut() {
            let b = r.breakdown;
            *out = AvsrStepReport {
                step: r.step,
                frozen: r.frozen,
                grad_norm: r.grad_norm,
                total: b.total,
                l_asr: b.l_asr,
                l_order: b.l_order,
                l_direction: b.l_direction,
                l_speed: b.l_speed,
                l_temp: b.l_temp,
                l_ref: b.l_ref,
            };
        }
        Ok(())
    })
}

/// Writes the current parameters as a checkpoint file.
///
/// # Safety
/// `handle` came from [`avsr_trainer_new`]; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avsr_trainer_save(handle: *const AvsrTrainer, path: *const c_char) -> AvsrStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| Failure::null("handle"))?;
        checkpoint::save(&path_arg(path)?, &h.trainer.model().params)?;
        Ok(())
    })
}

/// # Safety
/// `handle` is NULL or came from [`avsr_trainer_new`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn avsr_trainer_free(handle: *mut AvsrTrainer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
