//! Property tests of the crate's algebraic invariants.

mod common;

use common::brute_force_iou;
use labelshift_core::distribution::LabelDistribution;
use labelshift_core::estimate::lse_pool;
use labelshift_core::maps::{argmax_map, softmax, LabelMap, LogitMap, IGNORE_LABEL};
use labelshift_core::metrics::{accumulate_confusion, iou_per_class, ConfusionMatrix};
use labelshift_core::rectify::{adjust_posterior, cr_loss_and_grad, ratio, RatioVector};
use labelshift_core::synth::{bayes_posterior, SceneSpec};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn logit_values() -> impl Strategy<Value = f64> {
    -30.0..30.0f64
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01..1.0f64, k).prop_map(|w| {
        let sum: f64 = w.iter().sum();
        w.into_iter().map(|v| v / sum).collect()
    })
}

fn positive_ratio(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-3..1e3f64, k)
}

fn label_pair(h: usize, w: usize, k: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    let gt = proptest::collection::vec(
        prop_oneof![9 => 0..k as u8, 1 => Just(IGNORE_LABEL)],
        h * w,
    );
    let pred = proptest::collection::vec(0..k as u8, h * w);
    (gt, pred)
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        values in proptest::collection::vec(logit_values(), 4),
        shift in -500.0..500.0f64
    ) {
        let base = LogitMap::new(Array3::from_shape_vec((1, 1, 4), values.clone()).unwrap()).unwrap();
        let shifted = LogitMap::new(
            Array3::from_shape_vec((1, 1, 4), values.iter().map(|v| v + shift).collect()).unwrap(),
        ).unwrap();
        let a = softmax(&base);
        let b = softmax(&shifted);
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_of_softmax_equals_argmax_of_logits(
        values in proptest::collection::vec(logit_values(), 2 * 3 * 4)
    ) {
        let logits = LogitMap::new(Array3::from_shape_vec((2, 3, 4), values).unwrap()).unwrap();
        let via_probs = argmax_map(&softmax(&logits));
        prop_assert_eq!(via_probs, logits.argmax());
    }

    #[test]
    fn confusion_total_counts_scored_pixels(
        (gt, pred) in label_pair(4, 4, 3)
    ) {
        let gt = LabelMap::new(Array2::from_shape_vec((4, 4), gt).unwrap(), 3).unwrap();
        let pred = LabelMap::new(Array2::from_shape_vec((4, 4), pred).unwrap(), 3).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&pred, &gt, &mut cm).unwrap();
        prop_assert_eq!(cm.total() as usize, gt.scored_pixels());
    }

    #[test]
    fn iou_matches_brute_force_set_computation(
        (gt, pred) in label_pair(8, 8, 4)
    ) {
        let gt = LabelMap::new(Array2::from_shape_vec((8, 8), gt).unwrap(), 4).unwrap();
        let pred = LabelMap::new(Array2::from_shape_vec((8, 8), pred).unwrap(), 4).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        accumulate_confusion(&pred, &gt, &mut cm).unwrap();
        prop_assert_eq!(iou_per_class(&cm), brute_force_iou(&pred, &gt, 4));
    }

    #[test]
    fn bayes_posterior_is_a_simplex_point(
        feature in proptest::collection::vec(-50.0..50.0f64, 3),
        priors in simplex(4)
    ) {
        let spec = SceneSpec {
            height: 1,
            width: 1,
            num_classes: 4,
            feature_dim: 3,
            class_means: vec![
                vec![0.0, 0.0, 0.0],
                vec![2.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0],
                vec![0.0, 0.0, 2.0],
            ],
            noise_sigma: 0.7,
            label_marginal: LabelDistribution::new(priors).unwrap(),
            conditional_shift: vec![0.0, 0.0, 0.0],
            blob_count: 1,
            seed: 0,
        };
        let post = bayes_posterior(&feature, &spec);
        prop_assert!(post.iter().all(|p| *p >= 0.0 && p.is_finite()));
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_swap_equals_posterior_reweighting(
        feature in proptest::collection::vec(-10.0..10.0f64, 3),
        priors_s in simplex(4),
        priors_t in simplex(4)
    ) {
        // With shared conditionals, the target-prior posterior equals the
        // source-prior posterior rescaled by the prior ratio.
        let mut spec = SceneSpec {
            height: 1,
            width: 1,
            num_classes: 4,
            feature_dim: 3,
            class_means: vec![
                vec![0.0, 0.0, 0.0],
                vec![2.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0],
                vec![0.0, 0.0, 2.0],
            ],
            noise_sigma: 0.7,
            label_marginal: LabelDistribution::new(priors_s.clone()).unwrap(),
            conditional_shift: vec![0.0, 0.0, 0.0],
            blob_count: 1,
            seed: 0,
        };
        let post_s = bayes_posterior(&feature, &spec);
        spec.label_marginal = LabelDistribution::new(priors_t.clone()).unwrap();
        let post_t = bayes_posterior(&feature, &spec);

        let r: Vec<f64> = priors_t.iter().zip(&priors_s).map(|(t, s)| t / s).collect();
        let adjusted = adjust_posterior(&post_s, &RatioVector::new(r).unwrap()).unwrap();
        for (a, b) in adjusted.iter().zip(&post_t) {
            prop_assert!((a - b).abs() < 1e-10, "adjusted {a} vs direct {b}");
        }
    }

    #[test]
    fn adjustment_round_trips_through_reciprocal(
        posterior in simplex(5),
        ratio_values in positive_ratio(5)
    ) {
        let r = RatioVector::new(ratio_values).unwrap();
        let there = adjust_posterior(&posterior, &r).unwrap();
        let back = adjust_posterior(&there, &r.reciprocal()).unwrap();
        for (a, b) in back.iter().zip(&posterior) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn refinement_loss_routes_agree(
        values in proptest::collection::vec(-8.0..8.0f64, 3),
        label in 0..3u8,
        weights_s in simplex(3),
        weights_t in simplex(3)
    ) {
        // Explicit remolded-posterior route vs the shifted-logit
        // implementation.
        let logits = LogitMap::new(Array3::from_shape_vec((1, 1, 3), values).unwrap()).unwrap();
        let labels = LabelMap::new(Array2::from_elem((1, 1), label), 3).unwrap();
        let p_s = LabelDistribution::new(weights_s).unwrap();
        let p_t = LabelDistribution::new(weights_t).unwrap();
        let (loss, _) = cr_loss_and_grad(&logits, &labels, &p_s, &p_t).unwrap();

        let probs = softmax(&logits);
        let r = ratio(&p_s, &p_t, 1e-6).unwrap();
        let pixel: Vec<f64> = (0..3).map(|k| probs.values()[(0, 0, k)]).collect();
        let remolded = adjust_posterior(&pixel, &r).unwrap();
        let explicit = -remolded[label as usize].ln();
        prop_assert!((loss - explicit).abs() < 1e-10);
    }

    #[test]
    fn lse_pool_is_bounded_by_mean_and_max(
        values in proptest::collection::vec(-20.0..20.0f64, 1..32)
    ) {
        let n = values.len();
        let pooled = lse_pool(values.iter().cloned(), n);
        let mean = values.iter().sum::<f64>() / n as f64;
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(pooled >= mean - 1e-12);
        prop_assert!(pooled <= max + 1e-12);
    }

    #[test]
    fn lse_pool_is_monotone_in_every_value(
        values in proptest::collection::vec(0.0..1.0f64, 2..16),
        index in any::<prop::sample::Index>(),
        bump in 0.0..0.5f64
    ) {
        let n = values.len();
        let base = lse_pool(values.iter().cloned(), n);
        let mut bumped = values.clone();
        let i = index.index(n);
        bumped[i] += bump;
        let after = lse_pool(bumped.into_iter(), n);
        prop_assert!(after >= base - 1e-12);
    }
}
