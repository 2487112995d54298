use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use avsr_core::checkpoint;
use avsr_core::gradcheck::tiny_run_config;
use avsr_core::metrics::{nwer, nwer_noise_dominant, EvalTable};
use avsr_core::synth::{measured_snr_db, Modality, RawSignal};
use avsr_core::tensor::Matrix;
use avsr_ffi::*;

fn last_error() -> String {
    let p = avsr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn tiny_config_text(steps: usize) -> CString {
    let mut cfg = tiny_run_config();
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    CString::new(cfg.to_toml()).unwrap()
}

#[test]
fn wer_reports_status_and_value() {
    let (r, h) = ([4u32, 5, 6, 7], [4u32, 9, 6]);
    let mut out = 0.0;
    let s = unsafe { avsr_wer(r.as_ptr(), r.len(), h.as_ptr(), h.len(), &mut out) };
    assert_eq!(s, AvsrStatus::Ok);
    assert_eq!(out, 50.0);

    let s = unsafe { avsr_wer(ptr::null(), 0, h.as_ptr(), h.len(), &mut out) };
    assert_eq!(s, AvsrStatus::InvalidArgument);
    assert!(last_error().contains("non-empty"));

    let s = unsafe { avsr_wer(ptr::null(), 2, h.as_ptr(), h.len(), &mut out) };
    assert_eq!(s, AvsrStatus::NullArgument);
    assert_eq!(last_error(), "reference is null");

    let s = unsafe { avsr_wer(r.as_ptr(), r.len(), h.as_ptr(), h.len(), ptr::null_mut()) };
    assert_eq!(s, AvsrStatus::NullArgument);
}

#[test]
fn nwer_matches_the_library() {
    let cells: Vec<f64> = (0..AVSR_GRID_CELLS).map(|i| 1.5 * i as f64 + 0.25).collect();
    let (mut n, mut nd) = (0.0, 0.0);
    assert_eq!(unsafe { avsr_nwer(cells.as_ptr(), &mut n, &mut nd) }, AvsrStatus::Ok);
    let row = |k: usize| -> [f64; 5] { cells[5 * k..5 * k + 5].try_into().unwrap() };
    let table = EvalTable::from_rows(&[
        (avsr_core::synth::NoiseCategory::Babble, row(0)),
        (avsr_core::synth::NoiseCategory::Speech, row(1)),
        (avsr_core::synth::NoiseCategory::Music, row(2)),
        (avsr_core::synth::NoiseCategory::Natural, row(3)),
    ]);
    assert_eq!(n, nwer(&table).unwrap());
    assert_eq!(nd, nwer_noise_dominant(&table).unwrap());
    assert_eq!(unsafe { avsr_nwer(ptr::null(), &mut n, &mut nd) }, AvsrStatus::NullArgument);
}

#[test]
fn mixing_through_the_abi_is_exact() {
    let clean: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.7).collect();
    let noise: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).sin()).collect();
    let mut out = vec![0.0; 12];
    let s = unsafe { avsr_mix_noise_at_snr(clean.as_ptr(), 4, 3, noise.as_ptr(), 2, -5.0, out.as_mut_ptr()) };
    assert_eq!(s, AvsrStatus::Ok);
    let added: Vec<f64> = out.iter().zip(&clean).map(|(m, c)| m - c).collect();
    let clean_sig = RawSignal::new(Modality::Audio, Matrix::from_vec(4, 3, clean.clone()));
    assert!((measured_snr_db(&clean_sig, &Matrix::from_vec(4, 3, added)) + 5.0).abs() < 1e-9);

    let zeros = [0.0; 6];
    let s = unsafe { avsr_mix_noise_at_snr(clean.as_ptr(), 4, 3, zeros.as_ptr(), 2, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, AvsrStatus::InvalidArgument);
    assert!(last_error().contains("zero power"));
    let s = unsafe { avsr_mix_noise_at_snr(clean.as_ptr(), 0, 3, noise.as_ptr(), 2, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, AvsrStatus::InvalidArgument);
}

#[test]
fn trainer_and_checkpoint_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.avck").to_str().unwrap()).unwrap();
    let mut trainer = ptr::null_mut();
    assert_eq!(unsafe { avsr_trainer_new(tiny_config_text(3).as_ptr(), &mut trainer) }, AvsrStatus::Ok);
    let mut report = AvsrStepReport::default();
    for step in 0..3 {
        assert_eq!(unsafe { avsr_trainer_step(trainer, &mut report) }, AvsrStatus::Ok);
        assert_eq!(report.step, step);
        let composed = report.l_asr + 0.05 * report.l_temp + 0.1 * report.l_ref;
        assert!((report.total - composed).abs() < 1e-12);
    }
    assert_eq!(unsafe { avsr_trainer_step(trainer, ptr::null_mut()) }, AvsrStatus::Ok);
    assert_eq!(unsafe { avsr_trainer_save(trainer, path.as_ptr()) }, AvsrStatus::Ok);
    unsafe { avsr_trainer_free(trainer) };

    let expected = checkpoint::load(Path::new(path.to_str().unwrap())).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { avsr_checkpoint_open(path.as_ptr(), &mut handle) }, AvsrStatus::Ok);
    let len = unsafe { avsr_checkpoint_len(handle) };
    assert_eq!(len, expected.len());
    for (i, (name, m)) in expected.iter().enumerate() {
        let got = unsafe { CStr::from_ptr(avsr_checkpoint_name(handle, i)) };
        assert_eq!(got.to_str().unwrap(), name);
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(unsafe { avsr_checkpoint_shape(handle, i, &mut rows, &mut cols) }, AvsrStatus::Ok);
        assert_eq!((rows, cols), m.shape());
        let data = unsafe { std::slice::from_raw_parts(avsr_checkpoint_data(handle, i), rows * cols) };
        assert_eq!(data, m.as_slice());
    }
    assert!(unsafe { avsr_checkpoint_name(handle, len) }.is_null());
    assert!(unsafe { avsr_checkpoint_data(handle, len) }.is_null());
    let (mut rows, mut cols) = (0, 0);
    assert_eq!(
        unsafe { avsr_checkpoint_shape(handle, len, &mut rows, &mut cols) },
        AvsrStatus::InvalidArgument
    );
    unsafe { avsr_checkpoint_free(handle) };
    unsafe { avsr_checkpoint_free(ptr::null_mut()) };
    unsafe { avsr_trainer_free(ptr::null_mut()) };
    assert_eq!(unsafe { avsr_checkpoint_len(ptr::null()) }, 0);
}

#[test]
fn failures_map_to_status_codes() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/x.avck").unwrap();
    assert_eq!(unsafe { avsr_checkpoint_open(missing.as_ptr(), &mut handle) }, AvsrStatus::Io);
    assert!(handle.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.avck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { avsr_checkpoint_open(junk.as_ptr(), &mut handle) }, AvsrStatus::Checkpoint);
    assert!(last_error().contains("magic"));
    assert_eq!(unsafe { avsr_checkpoint_open(ptr::null(), &mut handle) }, AvsrStatus::NullArgument);

    let mut trainer = ptr::null_mut();
    let bad = CString::new("[model]\nheads = 5\n").unwrap();
    assert_eq!(unsafe { avsr_trainer_new(bad.as_ptr(), &mut trainer) }, AvsrStatus::Config);
    assert!(trainer.is_null());
    assert_eq!(unsafe { avsr_trainer_step(ptr::null_mut(), ptr::null_mut()) }, AvsrStatus::NullArgument);

    let diverging = {
        let mut cfg = tiny_run_config();
        cfg.train.learning_rate = f64::MAX;
        cfg.train.optimizer = avsr_core::model::Optimizer::Sgd;
        CString::new(cfg.to_toml()).unwrap()
    };
    assert_eq!(unsafe { avsr_trainer_new(diverging.as_ptr(), &mut trainer) }, AvsrStatus::Ok);
    let status = (0..3)
        .map(|_| unsafe { avsr_trainer_step(trainer, ptr::null_mut()) })
        .find(|&s| s != AvsrStatus::Ok);
    assert_eq!(status, Some(AvsrStatus::Numeric));
    assert!(last_error().starts_with("non-finite"));
    unsafe { avsr_trainer_free(trainer) };
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include").join("avsr.h");
    assert!(std::fs::read_to_string(&header).unwrap().contains("avsr_trainer_step"));
    let lib = target_dir().join("libavsr_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests").join("c").join("smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap_or_else(|e| panic!("C compiler `{cc}` unavailable: {e}"));
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));

    let ckpt = dir.path().join("c.avck");
    let run = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    let expected = checkpoint::load(&ckpt).unwrap();
    let first = expected.names().next().unwrap();
    assert_eq!(stdout.trim(), format!("{} {first}", expected.len()));
}
