//! Label-distribution estimation.
//!
//! Source side: a class counts toward an image when strictly more than
//! `min_pixels` of its ground-truth pixels carry it; indicator counts are
//! normalized over the dataset. Target side (no labels): the model's
//! per-pixel outputs are aggregated into an image-level class score by
//! smooth max pooling (log of the spatial mean of exponentials) and compared
//! against the source pixel ratio of that class; scores above the ratio
//! count as present, and presence counts are normalized the same way.

use serde::{Deserialize, Serialize};

use crate::distribution::LabelDistribution;
use crate::error::{Error, Result};
use crate::maps::{softmax, LabelMap, ProbMap};
use crate::model::SceneModel;
use crate::synth::{class_pixel_counts, empirical_pixel_marginal, DomainDataset};

/// What the pooled model output means in the presence test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    /// Pool softmax probabilities; pooled values land in [0, 1] and are
    /// commensurable with the pixel ratio they are compared against.
    #[default]
    Probabilities,
    /// Pool raw scores; kept for ablation.
    Logits,
}

/// Estimation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Strict per-image pixel threshold: a class is present when its pixel
    /// count exceeds this.
    pub min_pixels: u64,
    #[serde(default)]
    pub output_space: OutputSpace,
}

impl EstimationConfig {
    /// Default threshold for an `H x W` scene: 0.1% of the pixels, rounded
    /// up.
    pub fn default_min_pixels(height: usize, width: usize) -> u64 {
        ((height * width) as f64 * 0.001).ceil() as u64
    }

    pub fn for_scene(height: usize, width: usize) -> Self {
        Self {
            min_pixels: Self::default_min_pixels(height, width),
            output_space: OutputSpace::Probabilities,
        }
    }
}

/// Per-class presence indicator of one labeled image under the strict pixel
/// threshold.
pub fn source_image_indicator(labels: &LabelMap, num_classes: usize, cfg: &EstimationConfig) -> Vec<bool> {
    class_pixel_counts(labels, num_classes)
        .into_iter()
        .map(|count| count > cfg.min_pixels)
        .collect()
}

/// Image-level source label distribution: normalized presence counts.
pub fn estimate_source_distribution(
    ds: &DomainDataset,
    cfg: &EstimationConfig,
) -> Result<LabelDistribution> {
    if ds.scenes.is_empty() {
        return Err(Error::EmptyInput("dataset has no scenes"));
    }
    let k = ds.spec.num_classes;
    let mut counts = vec![0u64; k];
    for scene in &ds.scenes {
        for (count, present) in counts
            .iter_mut()
            .zip(source_image_indicator(&scene.labels, k, cfg))
        {
            if present {
                *count += 1;
            }
        }
    }
    LabelDistribution::from_counts(&counts)
        .map_err(|_| Error::EmptyInput("no class exceeds the pixel threshold in any scene"))
}

/// Dataset-level pixel ratio of each class in the source domain.
pub fn source_pixel_ratio(ds: &DomainDataset) -> Result<LabelDistribution> {
    empirical_pixel_marginal(ds)
}

/// Smooth max pooling of one class plane: `log((1/HW) * sum exp(v))`,
/// computed max-shifted. The result always lies in `[mean(v), max(v)]`.
pub fn lse_pool(values: impl IntoIterator<Item = f64>, pixel_count: usize) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    debug_assert_eq!(values.len(), pixel_count);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / pixel_count as f64).ln()
}

/// Pools every class plane of a scene's model output according to the
/// configured output space.
pub fn pooled_class_scores(
    probs: &ProbMap,
    logits_for_ablation: Option<&crate::maps::LogitMap>,
    cfg: &EstimationConfig,
) -> Vec<f64> {
    let (h, w, k) = probs.dim();
    let n = h * w;
    (0..k)
        .map(|class| match cfg.output_space {
            OutputSpace::Probabilities => lse_pool(
                probs.values().slice(ndarray::s![.., .., class]).iter().cloned(),
                n,
            ),
            OutputSpace::Logits => {
                let logits = logits_for_ablation.expect("logits mode needs raw scores");
                lse_pool(
                    logits.values().slice(ndarray::s![.., .., class]).iter().cloned(),
                    n,
                )
            }
        })
        .collect()
}

/// Target-side presence indicator of one scene: pooled class score strictly
/// above the source pixel ratio.
pub fn target_image_indicator(pooled: &[f64], pixel_ratio: &LabelDistribution) -> Result<Vec<bool>> {
    if pooled.len() != pixel_ratio.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "pooled scores have {} classes, pixel ratio has {}",
            pooled.len(),
            pixel_ratio.num_classes()
        )));
    }
    Ok(pooled
        .iter()
        .zip(pixel_ratio.probs())
        .map(|(score, ratio)| score > ratio)
        .collect())
}

/// Image-level target label distribution from model outputs: run the model
/// on every scene, pool, threshold against the source pixel ratio, and
/// normalize the presence counts.
pub fn estimate_target_distribution(
    tgt: &DomainDataset,
    model: &dyn SceneModel,
    pixel_ratio: &LabelDistribution,
    cfg: &EstimationConfig,
) -> Result<LabelDistribution> {
    if tgt.scenes.is_empty() {
        return Err(Error::EmptyInput("dataset has no scenes"));
    }
    let k = tgt.spec.num_classes;
    if pixel_ratio.num_classes() != k {
        return Err(Error::DimensionMismatch(
            "pixel ratio does not match the dataset classes".into(),
        ));
    }
    let mut counts = vec![0u64; k];
    for scene in &tgt.scenes {
        let logits = model.predict_logits(&scene.features)?;
        let probs = softmax(&logits);
        let pooled = pooled_class_scores(&probs, Some(&logits), cfg);
        for (count, present) in counts.iter_mut().zip(target_image_indicator(&pooled, pixel_ratio)?) {
            if present {
                *count += 1;
            }
        }
    }
    LabelDistribution::from_counts(&counts)
        .map_err(|_| Error::EmptyInput("no class pooled above its pixel ratio in any scene"))
}
