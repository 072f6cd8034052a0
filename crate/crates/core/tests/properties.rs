//! Property tests over randomly drawn inputs.

mod common;

use ktda::config::RunConfig;
use ktda::data::{self, kseg, DatasetSpec};
use ktda::metrics::ConfusionMatrix;
use ktda::train::{lr_at, OptimConfig};
use ktda::Tensor;
use proptest::prelude::*;

fn labels(len: usize, classes: u8) -> impl Strategy<Value = Vec<u8>> {
    // 255 marks ignored pixels
    prop::collection::vec(prop_oneof![8 => 0..classes, 1 => Just(255u8)], len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metrics_match_brute_force(
        (pred, gt) in (1usize..200).prop_flat_map(|n| (prop::collection::vec(0u8..4, n), labels(n, 4)))
    ) {
        prop_assume!(gt.iter().any(|&g| g != 255));
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt, 255).unwrap();
        let (miou, oa, f1) = common::brute_force_metrics(&pred, &gt, 4, 255);
        prop_assert!((cm.miou().unwrap() - miou).abs() <= 1e-12);
        prop_assert!((cm.oa().unwrap() - oa).abs() <= 1e-12);
        prop_assert!((cm.f1().unwrap() - f1).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_class_relabelling(
        (pred, gt) in (1usize..200).prop_flat_map(|n| (prop::collection::vec(0u8..5, n), labels(n, 5))),
        perm in Just(vec![0u8, 1, 2, 3, 4]).prop_shuffle(),
    ) {
        prop_assume!(gt.iter().any(|&g| g != 255));
        let relabel = |v: &[u8]| -> Vec<u8> { v.iter().map(|&c| if c == 255 { 255 } else { perm[c as usize] }).collect() };
        let mut a = ConfusionMatrix::new(5);
        a.accumulate(&pred, &gt, 255).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&relabel(&pred), &relabel(&gt), 255).unwrap();
        prop_assert_eq!(a.summary().unwrap(), b.summary().unwrap());
    }

    #[test]
    fn confusion_merge_equals_joint_accumulation(
        (pred, gt) in (2usize..120).prop_flat_map(|n| (prop::collection::vec(0u8..3, n), labels(n, 3))),
        cut in 0.0f64..1.0,
    ) {
        let mid = (cut * pred.len() as f64) as usize;
        let mut joint = ConfusionMatrix::new(3);
        joint.accumulate(&pred, &gt, 255).unwrap();
        let mut left = ConfusionMatrix::new(3);
        left.accumulate(&pred[..mid], &gt[..mid], 255).unwrap();
        let mut right = ConfusionMatrix::new(3);
        right.accumulate(&pred[mid..], &gt[mid..], 255).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(left, joint);
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1.0,
        blocks in 0usize..5,
        batch in 1usize..9,
        seed in any::<u64>(),
        kl in any::<bool>(),
        weights in prop::collection::vec(0.01f64..10.0, 5),
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("optim.base_lr", &lr.to_string()).unwrap();
        cfg.set("model.fmm.blocks", &blocks.to_string()).unwrap();
        cfg.set("train.batch_size", &batch.to_string()).unwrap();
        cfg.set("model.seed", &seed.to_string()).unwrap();
        cfg.set("loss.kl", &kl.to_string()).unwrap();
        let list: Vec<String> = weights.iter().map(f64::to_string).collect();
        cfg.set("data.class_weights", &list.join(",")).unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn lr_schedule_follows_closed_form(
        warmup in 1usize..50,
        extra in 1usize..500,
        power in 0.1f64..3.0,
        frac in 0.0f64..=1.0,
    ) {
        let cfg = OptimConfig { warmup_iters: warmup, max_iters: warmup + extra, poly_power: power, ..OptimConfig::default() };
        let iter = (frac * cfg.max_iters as f64) as usize;
        let want = common::poly_lr(iter, cfg.base_lr, warmup, cfg.max_iters, power, cfg.min_lr);
        let got = lr_at(iter, &cfg).unwrap();
        prop_assert!((got - want).abs() <= 1e-15);
        prop_assert!(got <= cfg.base_lr);
        if iter > warmup {
            prop_assert!(got <= lr_at(iter - 1, &cfg).unwrap());
        }
    }

    #[test]
    fn broadcast_add_matches_loops(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let a: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64) * 0.25 - 10.0).collect();
        let b: Vec<f64> = (0..cols).map(|j| j as f64 * 1.5 - 2.0).collect();
        let sum = Tensor::new(&[rows, cols], a.clone()).unwrap().add(&Tensor::new(&[1, cols], b.clone()).unwrap()).unwrap();
        prop_assert_eq!(sum.shape(), &[rows, cols][..]);
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(sum.data()[i * cols + j], a[i * cols + j] + b[j]);
            }
        }
    }

    #[test]
    fn matmul_is_bit_identical_to_the_reference_loop(
        (m, k, n, a, b) in (1usize..20, 1usize..20, 1usize..40)
            .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), matrix(m, k), matrix(k, n)))
    ) {
        let got = Tensor::new(&[m, k], a.clone()).unwrap().matmul(&Tensor::new(&[k, n], b.clone()).unwrap()).unwrap();
        let mut want = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        prop_assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, data in matrix(6, 8)) {
        let t = Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap();
        let s = t.softmax(1).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_size_bilinear_resize_is_identity(h in 1usize..7, w in 1usize..7, data in matrix(2 * 6, 6)) {
        let t = Tensor::new(&[1, 2, h, w], data[..2 * h * w].to_vec()).unwrap();
        let resized = t.bilinear_resize(h, w).unwrap();
        prop_assert_eq!(resized.data(), t.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kseg_round_trips_generated_samples(seed in any::<u64>(), size in 4usize..24, classes in 2usize..7, index in 0usize..1000) {
        let spec = DatasetSpec { num_samples: index + 1, size, classes, seed, coarse_factor: 2, ..DatasetSpec::default() };
        let sample = data::generate_sample(&spec, index).unwrap();
        prop_assert!(sample.mask.iter().all(|&c| (c as usize) < classes));
        let bytes = kseg::encode(&sample);
        prop_assert_eq!(bytes.len(), kseg::encoded_len(size, size));
        let back = kseg::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &sample);
        prop_assert_eq!(kseg::encode(&back), bytes);
    }

    #[test]
    fn kseg_rejects_truncation(seed in any::<u64>(), cut in 1usize..64) {
        let spec = DatasetSpec { size: 8, seed, ..DatasetSpec::default() };
        let bytes = kseg::encode(&data::generate_sample(&spec, 0).unwrap());
        prop_assert!(kseg::decode(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }

    #[test]
    fn batches_partition_the_training_ids(n in 1usize..40, batch in 1usize..9, seed in any::<u64>(), epoch in 0usize..5) {
        let ids: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let batches = data::batch_iter(&ids, batch, seed, epoch).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, ids.clone());
        prop_assert_eq!(batches, data::batch_iter(&ids, batch, seed, epoch).unwrap());
    }
}
