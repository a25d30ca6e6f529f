//! Posterior correction of a source-biased classifier.
//!
//! A classifier trained under one class prior systematically skews its
//! posterior toward that prior. With the class-conditional feature
//! distributions aligned, multiplying the predicted posterior by the prior
//! ratio and renormalizing recovers the other domain's posterior. Two
//! mutually exclusive realizations are provided: inference adjustment (scale
//! the predictions before the argmax at test time) and classifier refinement
//! (retrain the head with its predictions remolded toward the source, so its
//! raw output becomes target-adapted). The loss-reweighting alternative is
//! implemented alongside for comparison.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::distribution::LabelDistribution;
use crate::error::{Error, Result};
use crate::maps::{LabelMap, LogitMap, ProbMap};
use crate::net::{
    flatten_grad, sgd_step, weighted_ce_loss_and_grad, OptimizerState, PixelNet, DEFAULT_BASE_LR,
};
use crate::synth::DomainDataset;

/// Default floor protecting prior ratios against estimated zeros.
pub const DEFAULT_RATIO_FLOOR: f64 = 1e-6;

/// Per-class positive multipliers, typically a ratio of two class priors.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioVector {
    values: Vec<f64>,
}

impl RatioVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("ratio vector is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ratio entries must be positive and finite, got {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reciprocal(&self) -> RatioVector {
        RatioVector {
            values: self.values.iter().map(|v| 1.0 / v).collect(),
        }
    }
}

/// Elementwise prior ratio `numer_k / denom_k`, both sides floored so that
/// estimated zeros stay finite.
pub fn ratio(
    numer: &LabelDistribution,
    denom: &LabelDistribution,
    floor: f64,
) -> Result<RatioVector> {
    if numer.num_classes() != denom.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "ratio of {}-class and {}-class distributions",
            numer.num_classes(),
            denom.num_classes()
        )));
    }
    if !(floor > 0.0) || !floor.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "ratio floor must be positive and finite, got {floor}"
        )));
    }
    RatioVector::new(
        numer
            .probs()
            .iter()
            .zip(denom.probs())
            .map(|(n, d)| n.max(floor) / d.max(floor))
            .collect(),
    )
}

/// Remolds a posterior by a prior ratio: `p'_k = p_k r_k / sum_j p_j r_j`.
pub fn adjust_posterior(posterior: &[f64], ratio: &RatioVector) -> Result<Vec<f64>> {
    if posterior.len() != ratio.len() {
        return Err(Error::DimensionMismatch(format!(
            "posterior has {} classes, ratio has {}",
            posterior.len(),
            ratio.len()
        )));
    }
    let weighted: Vec<f64> = posterior
        .iter()
        .zip(ratio.values())
        .map(|(p, r)| p * r)
        .collect();
    let sum: f64 = weighted.iter().sum();
    Ok(weighted.into_iter().map(|v| v / sum).collect())
}

/// Inference adjustment: per-pixel argmax of the prediction scaled by the
/// target/source prior ratio. The rescaled scores are not renormalized; the
/// argmax is scale-invariant.
pub fn inference_adjust(
    probs: &ProbMap,
    target_prior: &LabelDistribution,
    source_prior: &LabelDistribution,
) -> Result<LabelMap> {
    let r = ratio(target_prior, source_prior, DEFAULT_RATIO_FLOOR)?;
    adjusted_argmax(probs, &r)
}

/// Per-pixel argmax of `p ⊙ r` for an explicit ratio vector.
pub fn adjusted_argmax(probs: &ProbMap, r: &RatioVector) -> Result<LabelMap> {
    let (_, _, k) = probs.dim();
    if r.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "probability map has {k} classes, ratio has {}",
            r.len()
        )));
    }
    let mut scaled = probs.values().clone();
    for mut row in scaled.rows_mut() {
        for (v, ratio) in row.iter_mut().zip(r.values()) {
            *v *= ratio;
        }
    }
    // Reuse the logit argmax: scaled posteriors need no simplex guarantee.
    Ok(LogitMap::new(scaled)?.argmax())
}

/// Classifier-refinement loss: cross-entropy of the prediction remolded
/// toward the source by `P_s/P_t`. Implemented as plain cross-entropy on
/// logits shifted by `log(P_s(k)/P_t(k))`, which is algebraically identical
/// and stable for extreme ratios.
pub fn cr_loss_and_grad(
    logits: &LogitMap,
    labels: &LabelMap,
    source_prior: &LabelDistribution,
    target_prior: &LabelDistribution,
) -> Result<(f64, Array3<f64>)> {
    let r = ratio(source_prior, target_prior, DEFAULT_RATIO_FLOOR)?;
    if r.len() != logits.dim().2 {
        return Err(Error::DimensionMismatch(
            "prior ratio does not match the logit classes".into(),
        ));
    }
    let shifts: Vec<f64> = r.values().iter().map(|v| v.ln()).collect();
    weighted_ce_loss_and_grad(logits, labels, |k| (shifts[k], 1.0))
}

/// Loss-reweighting baseline: standard cross-entropy scaled per pixel by the
/// prior ratio `P_t(y)/P_s(y)` of its true class.
pub fn cls_weighted_loss_and_grad(
    logits: &LogitMap,
    labels: &LabelMap,
    source_prior: &LabelDistribution,
    target_prior: &LabelDistribution,
) -> Result<(f64, Array3<f64>)> {
    let r = ratio(target_prior, source_prior, DEFAULT_RATIO_FLOOR)?;
    if r.len() != logits.dim().2 {
        return Err(Error::DimensionMismatch(
            "prior ratio does not match the logit classes".into(),
        ));
    }
    let weights = r.values().to_vec();
    weighted_ce_loss_and_grad(logits, labels, |k| (0.0, weights[k]))
}

/// Head-retraining rule used by [`refine_classifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineRule {
    /// Remolded-posterior cross-entropy.
    PosteriorAdjustment,
    /// Ratio-weighted cross-entropy.
    LossReweighting,
}

/// Retrains the classifier head on labeled source scenes with the feature
/// extractor frozen. With `RefineRule::PosteriorAdjustment` the refined
/// head's raw predictions are target-adapted and need no further adjustment
/// at inference. Scene order is reshuffled each epoch from the provided
/// generator.
pub fn refine_classifier(
    net: &mut PixelNet,
    src: &DomainDataset,
    source_prior: &LabelDistribution,
    target_prior: &LabelDistribution,
    epochs: usize,
    rule: RefineRule,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if src.scenes.is_empty() {
        return Err(Error::EmptyInput("refinement needs source scenes"));
    }
    let k = src.spec.num_classes;
    if net.num_classes() != k {
        return Err(Error::DimensionMismatch(
            "network classes do not match the dataset".into(),
        ));
    }
    let max_iters = (epochs * src.scenes.len()).max(1);
    let mut opt = OptimizerState::new(net.mlp(), DEFAULT_BASE_LR, max_iters)
        .with_frozen_below(net.split_index());
    let mut order: Vec<usize> = (0..src.scenes.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for &idx in &order {
            let scene = &src.scenes[idx];
            let (h, w) = scene.labels.dim();
            let cache = net.forward_cached(&scene.features)?;
            let logits = LogitMap::new(
                cache
                    .output()
                    .clone()
                    .into_shape_with_order((h, w, k))
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
            )?;
            let (_, d_logits) = match rule {
                RefineRule::PosteriorAdjustment => {
                    cr_loss_and_grad(&logits, &scene.labels, source_prior, target_prior)?
                }
                RefineRule::LossReweighting => {
                    cls_weighted_loss_and_grad(&logits, &scene.labels, source_prior, target_prior)?
                }
            };
            let grads = net.backward_head(&cache, &flatten_grad(&d_logits));
            debug_assert!(grads.layers[..net.split_index()]
                .iter()
                .all(|l| l.weight.iter().all(|v| *v == 0.0) && l.bias.iter().all(|v| *v == 0.0)));
            sgd_step(net, &grads, &mut opt)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{argmax_map, softmax};
    use ndarray::{arr3, Array2, Array3};

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identity_ratio_is_all_ones() {
        let d = dist(&[0.4, 0.6]);
        let r = ratio(&d, &d, DEFAULT_RATIO_FLOOR).unwrap();
        assert_eq!(r.values(), &[1.0, 1.0]);
    }

    #[test]
    fn ratio_hand_value() {
        let r = ratio(&dist(&[0.8, 0.2]), &dist(&[0.5, 0.5]), DEFAULT_RATIO_FLOOR).unwrap();
        assert!((r.values()[0] - 1.6).abs() < 1e-12);
        assert!((r.values()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ratio_floors_zero_denominators() {
        let r = ratio(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]), 1e-6).unwrap();
        assert!(r.values().iter().all(|v| v.is_finite() && *v > 0.0));
        assert!((r.values()[1] - 0.5 / 1e-6).abs() < 1e-4);
    }

    #[test]
    fn unit_ratio_leaves_posterior() {
        let r = RatioVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        let p = [0.2, 0.5, 0.3];
        let adjusted = adjust_posterior(&p, &r).unwrap();
        for (a, b) in adjusted.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adjust_posterior_hand_value() {
        let r = RatioVector::new(vec![1.6, 0.4]).unwrap();
        let adjusted = adjust_posterior(&[0.5, 0.5], &r).unwrap();
        assert!((adjusted[0] - 0.8).abs() < 1e-12);
        assert!((adjusted[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn one_hot_posterior_is_fixed_point() {
        let r = RatioVector::new(vec![3.0, 0.2]).unwrap();
        let adjusted = adjust_posterior(&[1.0, 0.0], &r).unwrap();
        assert_eq!(adjusted, vec![1.0, 0.0]);
    }

    #[test]
    fn inference_adjust_with_equal_priors_is_plain_argmax() {
        let probs = ProbMap::new(arr3(&[[[0.7, 0.3], [0.2, 0.8]]])).unwrap();
        let d = dist(&[0.5, 0.5]);
        let adjusted = inference_adjust(&probs, &d, &d).unwrap();
        assert_eq!(adjusted, argmax_map(&probs));
    }

    #[test]
    fn inference_adjust_hand_value() {
        // p = [0.55, 0.45], ratio = [0.5, 2.0]: 0.275 vs 0.9 -> class 1.
        let probs = ProbMap::new(arr3(&[[[0.55, 0.45]]])).unwrap();
        let adjusted = adjusted_argmax(&probs, &RatioVector::new(vec![0.5, 2.0]).unwrap()).unwrap();
        assert_eq!(adjusted.labels()[(0, 0)], 1);
    }

    #[test]
    fn cr_loss_with_equal_priors_is_cross_entropy() {
        use crate::net::ce_loss_and_grad;
        let logits = LogitMap::new(arr3(&[[[0.3, -0.8], [1.5, 0.2]]])).unwrap();
        let labels = LabelMap::new(Array2::from_shape_vec((1, 2), vec![0, 1]).unwrap(), 2).unwrap();
        let d = dist(&[0.4, 0.6]);
        let (cr, cr_grad) = cr_loss_and_grad(&logits, &labels, &d, &d).unwrap();
        let (ce, ce_grad) = ce_loss_and_grad(&logits, &labels).unwrap();
        assert!((cr - ce).abs() < 1e-12);
        for (a, b) in cr_grad.iter().zip(ce_grad.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cr_loss_hand_value() {
        // Uniform prediction, P_s = [0.5, 0.5], P_t = [0.2, 0.8], label 1:
        // remolded prediction [0.8, 0.2], loss = -ln 0.2.
        let logits = LogitMap::new(Array3::zeros((1, 1, 2))).unwrap();
        let labels = LabelMap::new(Array2::from_elem((1, 1), 1u8), 2).unwrap();
        let (loss, _) =
            cr_loss_and_grad(&logits, &labels, &dist(&[0.5, 0.5]), &dist(&[0.2, 0.8])).unwrap();
        assert!((loss - (-0.2f64.ln())).abs() < 1e-12);
        assert!((loss - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn cr_loss_matches_log_sum_formulation() {
        // The rewritten form: ln[1 + sum_{k' != y} (r_k'/r_y)(p_k'/p_y)]
        // with r = P_s/P_t, averaged over pixels.
        let logits = LogitMap::new(arr3(&[[[0.4, -1.1, 0.7], [2.0, 0.1, -0.5]]])).unwrap();
        let labels = LabelMap::new(Array2::from_shape_vec((1, 2), vec![2, 0]).unwrap(), 3).unwrap();
        let p_s = dist(&[0.5, 0.3, 0.2]);
        let p_t = dist(&[0.1, 0.3, 0.6]);
        let (loss, _) = cr_loss_and_grad(&logits, &labels, &p_s, &p_t).unwrap();

        let probs = softmax(&logits);
        let r = ratio(&p_s, &p_t, DEFAULT_RATIO_FLOOR).unwrap();
        let mut expected = 0.0;
        for (pixel, &y) in [(0usize, 0usize), (0, 1)].iter().zip(&[2u8, 0u8]) {
            let y = y as usize;
            let p = |k: usize| probs.values()[(pixel.0, pixel.1, k)];
            let sum: f64 = (0..3)
                .filter(|&k| k != y)
                .map(|k| (r.values()[k] / r.values()[y]) * (p(k) / p(y)))
                .sum();
            expected += (1.0 + sum).ln();
        }
        expected /= 2.0;
        assert!((loss - expected).abs() < 1e-10);
    }

    #[test]
    fn cls_loss_with_equal_priors_is_cross_entropy() {
        use crate::net::ce_loss_and_grad;
        let logits = LogitMap::new(arr3(&[[[0.3, -0.8], [1.5, 0.2]]])).unwrap();
        let labels = LabelMap::new(Array2::from_shape_vec((1, 2), vec![0, 1]).unwrap(), 2).unwrap();
        let d = dist(&[0.4, 0.6]);
        let (cls, _) = cls_weighted_loss_and_grad(&logits, &labels, &d, &d).unwrap();
        let (ce, _) = ce_loss_and_grad(&logits, &labels).unwrap();
        assert!((cls - ce).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_hand_value() {
        // p = [0.8, 0.2], label 0, weight P_t(0)/P_s(0) = 0.5:
        // 0.5 * ln(1 + 0.25) = 0.5 * (-ln 0.8).
        let logits =
            LogitMap::new(arr3(&[[[0.8f64.ln(), 0.2f64.ln()]]])).unwrap();
        let labels = LabelMap::new(Array2::zeros((1, 1)), 2).unwrap();
        let p_s = dist(&[0.5, 0.5]);
        let p_t = dist(&[0.25, 0.75]);
        let (loss, _) = cls_weighted_loss_and_grad(&logits, &labels, &p_s, &p_t).unwrap();
        assert!((loss - 0.5 * 1.25f64.ln()).abs() < 1e-12);
        assert!((loss - 0.11157).abs() < 1e-5);
    }
}
