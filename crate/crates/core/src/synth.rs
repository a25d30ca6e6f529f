//! Synthetic paired-domain scene generation.
//!
//! Scenes are Voronoi mosaics: a handful of seed points partition the image
//! into cells, each cell is assigned a class drawn from the domain's label
//! marginal, and every pixel's feature vector is drawn from an isotropic
//! Gaussian around its class mean (plus an optional domain-wide mean
//! translation). Label shift and conditional shift are therefore controlled
//! independently, and the exact pixelwise posterior is available in closed
//! form as a ground-truth oracle.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distribution::LabelDistribution;
use crate::error::{Error, Result};
use crate::maps::{LabelMap, LogitMap, IGNORE_LABEL};
use crate::model::SceneModel;
use crate::rng::{mix_seed, rng_from_seed};

/// Generative parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Per-class feature means, `num_classes` rows of `feature_dim` entries.
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic standard deviation of the per-pixel feature noise.
    pub noise_sigma: f64,
    pub label_marginal: LabelDistribution,
    /// Mean translation applied to every class; zero for pure label shift.
    pub conditional_shift: Vec<f64>,
    /// Number of Voronoi seed points per scene.
    pub blob_count: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter(
                "scene height and width must be positive".into(),
            ));
        }
        if self.num_classes < 2 || self.num_classes >= IGNORE_LABEL as usize {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be in [2, {}], got {}",
                IGNORE_LABEL as usize - 1,
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidParameter("feature_dim must be positive".into()));
        }
        if self.label_marginal.num_classes() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "label marginal has {} classes, spec has {}",
                self.label_marginal.num_classes(),
                self.num_classes
            )));
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.feature_dim)
        {
            return Err(Error::DimensionMismatch(
                "class_means must be num_classes rows of feature_dim entries".into(),
            ));
        }
        if self.conditional_shift.len() != self.feature_dim {
            return Err(Error::DimensionMismatch(
                "conditional_shift length must equal feature_dim".into(),
            ));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma must be positive and finite, got {}",
                self.noise_sigma
            )));
        }
        if self.blob_count == 0 {
            return Err(Error::InvalidParameter("blob_count must be at least 1".into()));
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.class_means[a] == self.class_means[b] {
                    return Err(Error::InvalidParameter(format!(
                        "class means {a} and {b} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Effective mean of class `k`: class mean plus the domain shift.
    fn shifted_mean(&self, k: usize) -> Vec<f64> {
        self.class_means[k]
            .iter()
            .zip(&self.conditional_shift)
            .map(|(m, s)| m + s)
            .collect()
    }
}

/// One synthetic scene: a feature map and its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub features: Array3<f64>,
    pub labels: LabelMap,
}

/// A set of scenes drawn from one domain spec.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub scenes: Vec<Scene>,
    pub spec: SceneSpec,
}

impl DomainDataset {
    pub fn num_scenes(&self) -> usize {
        self.scenes.len()
    }
}

fn sample_class(marginal: &LabelDistribution, rng: &mut ChaCha8Rng) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in marginal.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u8;
        }
    }
    (marginal.num_classes() - 1) as u8
}

/// Voronoi label map: `blob_count` seed points placed uniformly, each seed
/// assigned a class drawn i.i.d. from the label marginal, every pixel
/// labeled by its nearest seed (pixel centers, squared Euclidean distance,
/// first seed wins ties).
pub fn generate_label_map(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> LabelMap {
    let mut seeds = Vec::with_capacity(spec.blob_count);
    for _ in 0..spec.blob_count {
        let y: f64 = rng.gen::<f64>() * spec.height as f64;
        let x: f64 = rng.gen::<f64>() * spec.width as f64;
        let class = sample_class(&spec.label_marginal, rng);
        seeds.push((y, x, class));
    }
    let mut labels = Array2::<u8>::zeros((spec.height, spec.width));
    for ((r, c), out) in labels.indexed_iter_mut() {
        let py = r as f64 + 0.5;
        let px = c as f64 + 0.5;
        let mut best = seeds[0].2;
        let mut best_d = f64::INFINITY;
        for &(sy, sx, class) in &seeds {
            let d = (py - sy) * (py - sy) + (px - sx) * (px - sx);
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        *out = best;
    }
    LabelMap::from_raw(labels)
}

/// Draws per-pixel Gaussian features around the (shifted) class means.
/// Ignored pixels receive zero features and consume no randomness.
pub fn sample_features(labels: &LabelMap, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = labels.dim();
    let shifted: Vec<Vec<f64>> = (0..spec.num_classes).map(|k| spec.shifted_mean(k)).collect();
    let mut features = Array3::<f64>::zeros((h, w, spec.feature_dim));
    for r in 0..h {
        for c in 0..w {
            let label = labels.labels()[(r, c)];
            if label == IGNORE_LABEL {
                continue;
            }
            let mean = &shifted[label as usize];
            for j in 0..spec.feature_dim {
                let z: f64 = rng.sample(StandardNormal);
                features[(r, c, j)] = mean[j] + spec.noise_sigma * z;
            }
        }
    }
    Scene {
        features,
        labels: labels.clone(),
    }
}

/// Generates scene `index` of the dataset. The per-scene stream is derived
/// from the spec seed, so scenes are independent of dataset size and order.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Scene {
    let mut rng = rng_from_seed(mix_seed(spec.seed, index));
    let labels = generate_label_map(spec, &mut rng);
    sample_features(&labels, spec, &mut rng)
}

/// Generates a full dataset of `count` scenes.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<DomainDataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::EmptyInput("dataset scene count is zero"));
    }
    let scenes = (0..count as u64).map(|i| generate_scene(spec, i)).collect();
    Ok(DomainDataset {
        scenes,
        spec: spec.clone(),
    })
}

/// Exact class posterior at one feature vector under the generative model:
/// `posterior_k ∝ π_k · exp(−‖x − (μ_k+δ)‖² / (2σ²))`, evaluated in the log
/// domain.
pub fn bayes_posterior(feature: &[f64], spec: &SceneSpec) -> Vec<f64> {
    let log_post = bayes_log_posterior(feature, spec);
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = log_post.iter().map(|lp| (lp - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Unnormalized log posterior; finite whenever the class prior is positive.
fn bayes_log_posterior(feature: &[f64], spec: &SceneSpec) -> Vec<f64> {
    let inv_two_sigma_sq = 1.0 / (2.0 * spec.noise_sigma * spec.noise_sigma);
    (0..spec.num_classes)
        .map(|k| {
            let mean = spec.shifted_mean(k);
            let sq_dist: f64 = feature
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum();
            let prior = spec.label_marginal.prob(k);
            prior.ln() - sq_dist * inv_two_sigma_sq
        })
        .collect()
}

/// The exact posterior of a domain spec packaged as a scene-level model.
/// Its logits are the (unnormalized) log posterior, so a softmax recovers
/// the posterior itself.
#[derive(Debug, Clone)]
pub struct BayesOracle {
    spec: SceneSpec,
}

impl BayesOracle {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        if spec.label_marginal.probs().iter().any(|p| *p <= 0.0) {
            return Err(Error::InvalidParameter(
                "oracle requires strictly positive class priors".into(),
            ));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Oracle for the same conditionals under a different prior.
    pub fn with_marginal(&self, marginal: LabelDistribution) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.label_marginal = marginal;
        Self::new(spec)
    }
}

impl SceneModel for BayesOracle {
    fn predict_logits(&self, features: &Array3<f64>) -> Result<LogitMap> {
        let (h, w, d) = features.dim();
        if d != self.spec.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "features have dim {d}, oracle expects {}",
                self.spec.feature_dim
            )));
        }
        let mut values = Array3::<f64>::zeros((h, w, self.spec.num_classes));
        let mut feat = vec![0.0; d];
        for r in 0..h {
            for c in 0..w {
                for (j, f) in feat.iter_mut().enumerate() {
                    *f = features[(r, c, j)];
                }
                let log_post = bayes_log_posterior(&feat, &self.spec);
                for (k, lp) in log_post.into_iter().enumerate() {
                    values[(r, c, k)] = lp;
                }
            }
        }
        LogitMap::new(values)
    }
}

fn class_pixel_counts_into(labels: &LabelMap, counts: &mut [u64]) {
    for &l in labels.labels() {
        if l != IGNORE_LABEL {
            counts[l as usize] += 1;
        }
    }
}

/// Per-class pixel counts of one label map, ignore pixels excluded.
pub fn class_pixel_counts(labels: &LabelMap, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    class_pixel_counts_into(labels, &mut counts);
    counts
}

/// Ground-truth pixel-level class marginal over a dataset.
pub fn empirical_pixel_marginal(ds: &DomainDataset) -> Result<LabelDistribution> {
    if ds.scenes.is_empty() {
        return Err(Error::EmptyInput("dataset has no scenes"));
    }
    let mut counts = vec![0u64; ds.spec.num_classes];
    for scene in &ds.scenes {
        class_pixel_counts_into(&scene.labels, &mut counts);
    }
    LabelDistribution::from_counts(&counts)
        .map_err(|_| Error::EmptyInput("dataset has no scored pixels"))
}

/// Ground-truth image-level class marginal: a class counts toward a scene iff
/// strictly more than `min_pixels` of its pixels carry that class; indicator
/// counts are then normalized over the dataset.
pub fn empirical_image_marginal(ds: &DomainDataset, min_pixels: u64) -> Result<LabelDistribution> {
    if ds.scenes.is_empty() {
        return Err(Error::EmptyInput("dataset has no scenes"));
    }
    let k = ds.spec.num_classes;
    let mut indicator_counts = vec![0u64; k];
    for scene in &ds.scenes {
        let counts = class_pixel_counts(&scene.labels, k);
        for (ind, &count) in indicator_counts.iter_mut().zip(&counts) {
            if count > min_pixels {
                *ind += 1;
            }
        }
    }
    LabelDistribution::from_counts(&indicator_counts)
        .map_err(|_| Error::EmptyInput("no class exceeds the pixel threshold in any scene"))
}
