//! Property tests over randomized inputs.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use dampid::container::{decode_tensor, encode_tensor, Tensor};
use dampid::dataset::{generate_dataset, split_mix_zeta, split_sep_zeta, Dataset, DatasetConfig, WindowRef};
use dampid::experiments::{error_histogram, interval_eval, InputFilter, Interval, Prediction};
use dampid::features::{featurize_pair, log_freq_grid, stft, StftConfig};
use dampid::nn::{
    cell_step, forward, init_weights, lr_schedule, CellKind, CellState, ForwardMode, ModelSpec, SequenceBatch,
    TrainConfig,
};
use dampid::sim::{add_measurement_noise, InputSignal};
use ndarray::{Array1, Array3};
use proptest::prelude::*;

fn small_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = DatasetConfig {
            duration_s: 0.2,
            window_len: 51,
            ..DatasetConfig::new(false, 0.01, 3)
        };
        generate_dataset(&cfg).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_is_a_pure_function(y in prop::collection::vec(-5.0f64..5.0, 1..200), sigma in 0.0f64..0.5, seed: u64) {
        let a = add_measurement_noise(&y, sigma, seed).unwrap();
        let b = add_measurement_noise(&y, sigma, seed).unwrap();
        prop_assert_eq!(&a, &b);
        if sigma == 0.0 {
            prop_assert_eq!(&a, &y);
        }
    }

    #[test]
    fn splits_partition_windows(seed: u64, stride in 1usize..40, fold in 1u8..=2) {
        let ds = small_dataset();
        let windows = ds.windows(stride).unwrap();
        let all: BTreeSet<WindowRef> = windows.iter().copied().collect();
        for split in [split_mix_zeta(&windows, seed, fold).unwrap(), split_sep_zeta(ds, &windows, fold, seed).unwrap()] {
            let parts = [&split.train, &split.validation, &split.test];
            let total: usize = parts.iter().map(|p| p.len()).sum();
            let union: BTreeSet<WindowRef> = parts.iter().flat_map(|p| p.iter().copied()).collect();
            prop_assert_eq!(total, union.len());
            prop_assert_eq!(&union, &all);
        }
        let sep = split_sep_zeta(ds, &windows, fold, seed).unwrap();
        let zeta_key = |w: &WindowRef| (ds.zeta_of(w) * 1e6).round() as i64;
        let train_z: BTreeSet<i64> = sep.train.iter().chain(&sep.validation).map(zeta_key).collect();
        let test_z: BTreeSet<i64> = sep.test.iter().map(zeta_key).collect();
        prop_assert!(train_z.is_disjoint(&test_z));
    }

    #[test]
    fn window_refs_dereference_to_full_windows(stride in 1usize..60) {
        let ds = small_dataset();
        for w in ds.windows(stride).unwrap() {
            let (u, y) = ds.window_slices(&w);
            prop_assert_eq!(u.len(), ds.manifest.window_len);
            prop_assert_eq!(y.len(), ds.manifest.window_len);
        }
    }

    #[test]
    fn stft_is_linear(seed: u64, a in -3.0f64..3.0) {
        let mut rng = dampid::seed::rng_from_seed(seed);
        use rand::Rng;
        let x1: Vec<f64> = (0..3001).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..3001).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + q).collect();
        let grid = log_freq_grid();
        let cfg = StftConfig::default();
        let (s1, s2, sm) = (stft(&x1, cfg, &grid).unwrap(), stft(&x2, cfg, &grid).unwrap(), stft(&mix, cfg, &grid).unwrap());
        for ((m, p), q) in sm.values.iter().zip(&s1.values).zip(&s2.values) {
            let expect = p * a + q;
            let scale = (p.norm() * a.abs() + q.norm()).max(1e-300);
            prop_assert!((m - expect).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn features_roundtrip_through_container(seed: u64) {
        let mut rng = dampid::seed::rng_from_seed(seed);
        use rand::Rng;
        let u: Vec<f64> = (0..3001).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..3001).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = featurize_pair(&u, &y).unwrap();
        let t = Tensor::f64(vec![f.rows(), f.steps()], f.values.iter().copied().collect()).unwrap();
        let back = decode_tensor(&encode_tensor(&t), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back.dims, &vec![168, 11]);
        let vals = back.to_f64();
        for (a, b) in vals.iter().zip(f.values.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hidden_states_bounded(seed: u64, scale in 0.1f64..20.0, kind_idx in 0usize..3) {
        let kind = CellKind::ALL[kind_idx];
        let spec = ModelSpec { cell_kind: kind, input_size: 4, hidden_size: 6, fc1_size: 3, dropout_rate: 0.0, output_size: 1 };
        let mut w = init_weights::<f64>(&spec, seed).unwrap();
        for s in w.slices_mut() {
            s.iter_mut().for_each(|v| *v *= scale);
        }
        let mut state = CellState::zeros(kind, 6);
        for t in 0..12 {
            let x = Array1::from_shape_fn(4, |i| ((t * 7 + i) as f64).sin() * scale);
            state = cell_step(kind, &w.directions[0], x.view(), &state).unwrap();
            for &h in &state.h {
                if kind == CellKind::Gru {
                    prop_assert!((-1.0..=1.0).contains(&h));
                } else {
                    prop_assert!(h.abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_pure(seed: u64, kind_idx in 0usize..3) {
        let kind = CellKind::ALL[kind_idx];
        let spec = ModelSpec { cell_kind: kind, input_size: 5, hidden_size: 4, fc1_size: 6, dropout_rate: 0.5, output_size: 1 };
        let w = init_weights::<f32>(&spec, seed).unwrap();
        let data = Array3::from_shape_fn((3, 5, 7), |(b, i, t)| ((b * 31 + i * 7 + t) as f32 * 0.37).cos());
        let views: Vec<_> = data.outer_iter().collect();
        let batch = SequenceBatch::<f32>::from_views(&views).unwrap();
        let a = forward(&w, &batch, ForwardMode::Eval).unwrap().predictions;
        let b = forward(&w, &batch, ForwardMode::Eval).unwrap().predictions;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn histogram_cells_reconstruct_subset_mad(
        errs in prop::collection::vec((0usize..4, 0usize..3, 0usize..141, -0.5f64..0.5), 1..300),
        iv_idx in 0usize..5,
        steps_only: bool,
    ) {
        let inputs = [InputSignal::Step { magnitude: 1.0 }, InputSignal::Ramp { slope: 1.0 }, InputSignal::Step { magnitude: -1.0 }];
        let preds: Vec<Prediction> = errs
            .iter()
            .map(|&(zi, ii, si, e)| {
                let zeta = 0.1 * (zi + 1) as f64;
                Prediction { trajectory: zi * 3 + ii, start: si * 50, window_len: 3001, input: inputs[ii], zeta, fold: 1, predicted: zeta + e }
            })
            .collect();
        let interval = [Interval::FULL, Interval::EARLY, Interval::MIDDLE, Interval::LATE, Interval::END][iv_idx];
        let filter = if steps_only { InputFilter::Steps } else { InputFilter::All };
        match (error_histogram(&preds, 1000.0, interval, &filter), interval_eval(&preds, 1000.0, &filter, interval)) {
            (Ok(h), Ok(m)) => {
                prop_assert!((h.weighted_mad().unwrap() - m).abs() <= 1e-12);
                let n = preds.iter().filter(|p| filter.matches(&p.input) && interval.contains(p.start, 3001, 1000.0)).count();
                prop_assert_eq!(h.total_count(), n);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "histogram and direct MAD disagree on emptiness"),
        }
    }

    #[test]
    fn lr_schedule_never_increases(epochs in 1usize..200, long: bool) {
        let cfg = if long { TrainConfig::long_schedule() } else { TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for e in 1..=epochs {
            let lr = lr_schedule(e, &cfg);
            prop_assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn interval_labels_parse_back(a in 0u32..20, len in 1u32..20) {
        let iv = Interval::new(f64::from(a), f64::from(a + len));
        prop_assert_eq!(iv.label().parse::<Interval>().unwrap(), iv);
    }
}
