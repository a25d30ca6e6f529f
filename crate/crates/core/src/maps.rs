//! Per-pixel score, probability, and label maps for an `H x W` scene.

use ndarray::{Array2, Array3, ArrayView1};

use crate::error::{Error, Result};

/// Reserved sentinel for pixels excluded from losses and metrics.
///
/// Fixed at 255 to mirror the usual dense-prediction ignore convention, which
/// also caps the number of classes at 255.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel simplex tolerance for [`ProbMap`] validation.
const SIMPLEX_TOLERANCE: f64 = 1e-7;

/// Raw per-pixel class scores, shape `(H, W, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    values: Array3<f64>,
}

impl LogitMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, k) = values.dim();
        if h == 0 || w == 0 || k == 0 {
            return Err(Error::ShapeMismatch(format!(
                "logit map dimensions must be positive, got {h}x{w}x{k}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logit map"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Per-pixel argmax over classes, ties broken by the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        argmax_of(&self.values)
    }
}

/// Per-pixel class probabilities, shape `(H, W, K)`. Every pixel's K-vector
/// is a simplex point.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    values: Array3<f64>,
}

impl ProbMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, k) = values.dim();
        if h == 0 || w == 0 || k == 0 {
            return Err(Error::ShapeMismatch(format!(
                "probability map dimensions must be positive, got {h}x{w}x{k}"
            )));
        }
        for row in values.rows() {
            validate_simplex(row)?;
        }
        Ok(Self { values })
    }

    /// Skips per-pixel validation; for outputs that are simplex points by
    /// construction (e.g. a softmax).
    pub(crate) fn from_raw(values: Array3<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

fn validate_simplex(row: ArrayView1<'_, f64>) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(
            "probability map entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = row.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "pixel probabilities must sum to 1 within {SIMPLEX_TOLERANCE}, got {sum}"
        )));
    }
    Ok(())
}

/// Per-pixel integer labels in `{0..K-1}` plus the [`IGNORE_LABEL`] sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Array2<u8>,
}

impl LabelMap {
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes >= IGNORE_LABEL as usize {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be below the ignore sentinel {IGNORE_LABEL}, got {num_classes}"
            )));
        }
        if let Some(l) = labels
            .iter()
            .find(|l| **l != IGNORE_LABEL && **l as usize >= num_classes)
        {
            return Err(Error::InvalidParameter(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { labels })
    }

    pub(crate) fn from_raw(labels: Array2<u8>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Number of pixels carrying a real class label.
    pub fn scored_pixels(&self) -> usize {
        self.labels.iter().filter(|l| **l != IGNORE_LABEL).count()
    }
}

/// Numerically stabilized per-pixel softmax: the per-pixel max is subtracted
/// before exponentiation, so arbitrarily large (finite) logits are safe.
pub fn softmax(logits: &LogitMap) -> ProbMap {
    let mut values = logits.values().clone();
    for mut row in values.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    ProbMap::from_raw(values)
}

/// Row-wise stabilized softmax over flat `(N, K)` scores.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut values = scores.clone();
    for mut row in values.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    values
}

/// Per-pixel argmax over class probabilities, ties broken by the lowest
/// class index.
pub fn argmax_map(probs: &ProbMap) -> LabelMap {
    argmax_of(probs.values())
}

fn argmax_of(values: &Array3<f64>) -> LabelMap {
    let (h, w, _) = values.dim();
    let mut labels = Array2::<u8>::zeros((h, w));
    for ((r, c), out) in labels.indexed_iter_mut() {
        let mut best = 0usize;
        let mut best_val = values[(r, c, 0)];
        for (k, &v) in values.slice(ndarray::s![r, c, ..]).iter().enumerate() {
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        *out = best as u8;
    }
    LabelMap::from_raw(labels)
}
