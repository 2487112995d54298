use avsr_core::attention::{
    attention_traced, init_stacks, residual_projection, stacked_forward, AttentionVars, Architecture, StackConfig,
};
use avsr_core::autodiff::{finite_diff_check, Tape};
use avsr_core::checkpoint;
use avsr_core::config::RunConfig;
use avsr_core::metrics::{edit_distance, nwer, nwer_noise_dominant, wer, EvalArtifact, EvalTable};
use avsr_core::model::LossBreakdown;
use avsr_core::params::ParamStore;
use avsr_core::refine::{clean_reference, loss_ref};
use avsr_core::synth::{
    measured_snr_db, mix_noise_at_snr, Modality, NoiseCategory, NoiseCondition, RawSignal, SynthConfig, SynthWorld,
    SNR_GRID_DB,
};
use avsr_core::tensor::Matrix;
use avsr_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    Matrix::randn(rows, cols, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn brute_force_edits(a: &[u8], b: &[u8]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut best = n + m;
    for left in 0u32..1 << n {
        for right in 0u32..1 << m {
            if left.count_ones() != right.count_ones() {
                continue;
            }
            let li = (0..n).filter(|i| left & (1 << i) != 0);
            let ri = (0..m).filter(|j| right & (1 << j) != 0);
            let k = left.count_ones() as usize;
            let mismatched = li.zip(ri).filter(|&(i, j)| a[i] != b[j]).count();
            best = best.min(n + m - 2 * k + mismatched);
        }
    }
    best
}

fn stacks(cfg: &StackConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_stacks(cfg, &mut ChaCha8Rng::seed_from_u64(seed), &mut store).unwrap();
    store
}

fn architecture() -> impl Strategy<Value = Architecture> {
    prop::sample::select(Architecture::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..200.0, seed: u64) {
        let mut tape = Tape::new();
        let x = tape.constant(matrix(rows, cols, scale, seed));
        let p = tape.softmax_rows(x).unwrap();
        for r in 0..rows {
            let row = tape.value(p).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn stop_gradient_is_transparent_forward_and_opaque_backward(rows in 1usize..5, cols in 1usize..5, seed: u64) {
        let mut tape = Tape::new();
        let x = tape.param(matrix(rows, cols, 1.0, seed));
        let stopped = tape.stop_gradient(x).unwrap();
        prop_assert_eq!(tape.value(stopped).as_slice(), tape.value(x).as_slice());
        let sq = tape.mse(stopped, x).unwrap();
        let y = tape.sum_all(stopped).unwrap();
        let loss = tape.combine(&[(y, 1.0), (sq, 0.0)]).unwrap();
        let grads = tape.backward(loss).unwrap();
        prop_assert!(grads.wrt(x).as_slice().iter().all(|&g| g == 0.0));
        prop_assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn attention_weights_are_convex(arch_heads in prop::sample::select(vec![1usize, 2, 4]), rows in 1usize..6, kv_rows in 1usize..6, seed: u64) {
        let cfg = StackConfig { dim: 4, heads: arch_heads, architecture: Architecture::SaCa };
        let store = stacks(&cfg, seed);
        let mut tape = Tape::new();
        let b = tape.bind(&store, |_| false);
        let q = tape.constant(matrix(rows, 4, 1.0, seed ^ 1));
        let kv = tape.constant(matrix(kv_rows, 4, 1.0, seed ^ 2));
        let w = AttentionVars::bind(&b, "video.ca").unwrap();
        let trace = attention_traced(&mut tape, q, kv, &w, arch_heads, false).unwrap();
        prop_assert_eq!(trace.probabilities.len(), arch_heads);
        for p in trace.probabilities {
            for r in 0..rows {
                let row = tape.value(p).row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_residual_projections_make_the_stacks_identity(arch in architecture(), frames in 1usize..6, seed: u64) {
        let cfg = StackConfig { dim: 4, heads: 2, architecture: arch };
        let mut store = stacks(&cfg, seed);
        for modality in [Modality::Video, Modality::Audio] {
            store.get_mut(&residual_projection(modality, arch)).unwrap().as_mut_slice().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = tape.bind(&store, |_| false);
        let (v, a) = (matrix(frames, 4, 1.0, seed ^ 3), matrix(frames, 4, 1.0, seed ^ 4));
        let (f_v, f_a) = (tape.constant(v.clone()), tape.constant(a.clone()));
        let pair = stacked_forward(&mut tape, &b, &cfg, f_v, f_a).unwrap();
        prop_assert_eq!(tape.value(pair.video), &v);
        prop_assert_eq!(tape.value(pair.audio), &a);
    }

    #[test]
    fn mixing_hits_the_requested_snr(snr_idx in 0usize..5, frames in 2usize..40, noise_frames in 1usize..50, channels in 1usize..6, seed: u64) {
        let snr = SNR_GRID_DB[snr_idx] as f64;
        let clean = RawSignal::new(Modality::Audio, matrix(frames, channels, 1.3, seed));
        let noise = RawSignal::new(Modality::Audio, matrix(noise_frames, channels, 0.2, seed ^ 9));
        let mixed = mix_noise_at_snr(&clean, &noise, snr).unwrap();
        let mut added = mixed.samples.clone();
        added.scaled_add_assign(-1.0, &clean.samples);
        prop_assert!((measured_snr_db(&clean, &added) - snr).abs() <= 1e-6);
    }

    #[test]
    fn refinement_loss_is_nonnegative_and_zero_only_at_the_target(frames in 1usize..6, seed: u64, same: bool) {
        let clean = RawSignal::new(Modality::Audio, matrix(frames, 3, 1.0, seed));
        let mut store = ParamStore::new();
        store.insert("frontend.audio.W".into(), Matrix::identity(3));
        store.insert("frontend.audio.b".into(), Matrix::zeros(1, 3));
        let mut tape = Tape::new();
        let b = tape.bind(&store, |_| true);
        let reference = clean_reference(&mut tape, &b, Some(&clean)).unwrap();
        let guess = if same { clean.samples.clone() } else { matrix(frames, 3, 1.0, seed ^ 5) };
        let guess = tape.constant(guess);
        let l = loss_ref(&mut tape, guess, &reference).unwrap();
        let l = tape.value(l).item();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, same);
    }

    #[test]
    fn loss_breakdown_identity(l_asr in 0.0f64..10.0, o in 0.0f64..2.0, d in 0.0f64..3.0, s in 0.0f64..3.0, r in 0.0f64..5.0) {
        let b = LossBreakdown::compose(l_asr, o, d, s, r, 0.05, 0.1);
        prop_assert!((b.total - (b.l_asr + 0.05 * b.l_temp + 0.1 * b.l_ref)).abs() <= 1e-12);
        prop_assert!((b.l_temp - (o + d + s)).abs() <= 1e-12);
    }

    #[test]
    fn edit_distance_matches_exhaustive_alignment(
        a in prop::collection::vec(0u8..4, 0..8),
        b in prop::collection::vec(0u8..4, 0..8),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, brute_force_edits(&a, &b));
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert_eq!(d == 0, a == b);
        prop_assert!(d >= a.len().abs_diff(b.len()) && d <= a.len().max(b.len()));
        if !a.is_empty() {
            prop_assert_eq!(wer(&a, &b).unwrap(), 100.0 * d as f64 / a.len() as f64);
        }
    }

    #[test]
    fn edit_distance_obeys_the_triangle_inequality(
        a in prop::collection::vec(0u8..3, 0..7),
        b in prop::collection::vec(0u8..3, 0..7),
        c in prop::collection::vec(0u8..3, 0..7),
    ) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }

    #[test]
    fn nwer_is_a_permutation_invariant_mean(
        cells in prop::collection::vec(0.0f64..100.0, 20),
        perm_seed: u64,
        factor in 0.0f64..10.0,
    ) {
        use rand::seq::SliceRandom;
        let table = |values: &[f64]| {
            let mut t = EvalTable::new();
            for (cond, v) in NoiseCondition::noisy_grid().into_iter().zip(values) {
                t.insert(cond, *v);
            }
            t
        };
        let base = table(&cells);
        let mut shuffled = cells.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mean = cells.iter().sum::<f64>() / 20.0;
        prop_assert!((nwer(&base).unwrap() - mean).abs() <= 1e-9);
        prop_assert!((nwer(&table(&shuffled)).unwrap() - mean).abs() <= 1e-9);
        let scaled: Vec<f64> = cells.iter().map(|v| v * factor).collect();
        prop_assert!((nwer(&table(&scaled)).unwrap() - factor * mean).abs() <= 1e-9);
        prop_assert!((nwer_noise_dominant(&table(&scaled)).unwrap() - factor * nwer_noise_dominant(&base).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn eval_records_round_trip_exactly(cells in prop::collection::vec(0.0f64..400.0, 21), video_only: bool) {
        let mut t = EvalTable::new();
        for (cond, v) in NoiseCondition::full_grid().into_iter().zip(&cells) {
            t.insert(cond, *v / 7.0);
        }
        let a = EvalArtifact::new("prop", video_only, 5, t).unwrap();
        prop_assert_eq!(EvalArtifact::from_jsonl(&a.to_jsonl()).unwrap(), a);
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 0..6), seed: u64) {
        let mut store = ParamStore::new();
        for (i, (r, c)) in shapes.into_iter().enumerate() {
            store.insert(format!("p{i}.W"), matrix(r, c, 3.0, seed.wrapping_add(i as u64)));
        }
        let bytes = checkpoint::encode(&store);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        prop_assert_eq!(back.len(), store.len());
    }

    #[test]
    fn configs_round_trip(seed in 0..=i64::MAX as u64, steps in 0usize..5000, lr in 0.0f64..1.0, arch in architecture(), frames in 8usize..64) {
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        cfg.train.steps = steps;
        cfg.train.learning_rate = lr;
        cfg.model.architecture = arch;
        cfg.synth.frames = frames;
        cfg.validate().unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn seeds_beyond_the_toml_range_are_rejected(seed in i64::MAX as u64 + 1..=u64::MAX) {
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        prop_assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_pure_and_paired(seed: u64, noise_seed: u64, cat in prop::sample::select(NoiseCategory::ALL.to_vec())) {
        let world = SynthWorld::new(SynthConfig::default()).unwrap();
        let cond = NoiseCondition::noisy(cat, 0).unwrap();
        let a = world.example(seed, cond, noise_seed).unwrap();
        let b = world.example(seed, cond, noise_seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.video.frames(), a.noisy_audio.frames());
        prop_assert_eq!(a.noisy_audio.frames(), a.clean_audio.frames());
    }

    #[test]
    fn stacks_pass_random_gradient_checks(arch in architecture(), seed: u64) {
        let cfg = StackConfig { dim: 4, heads: 2, architecture: arch };
        let mut store = stacks(&cfg, seed);
        for modality in [Modality::Video, Modality::Audio] {
            let name = residual_projection(modality, arch);
            *store.get_mut(&name).unwrap() = matrix(4, 4, 0.5, seed ^ 11);
        }
        let (v, a, readout) = (matrix(4, 4, 1.0, seed ^ 6), matrix(4, 4, 1.0, seed ^ 7), matrix(4, 4, 1.0, seed ^ 8));
        let check = finite_diff_check(&store, 1e-6, None, |t, b| {
            let (f_v, f_a) = (t.constant(v.clone()), t.constant(a.clone()));
            let pair = stacked_forward(t, b, &cfg, f_v, f_a)?;
            let both = t.add(pair.video, pair.audio)?;
            let r = t.constant(readout.clone());
            let weighted = t.matmul(both, r)?;
            t.sum_all(weighted)
        }).unwrap();
        prop_assert!(check.max_relative_error < 1e-4, "{:?}", check);
        prop_assert!(check.analytic_l1 > 0.0);
    }
}
