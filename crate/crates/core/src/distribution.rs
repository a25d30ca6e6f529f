//! Class prior distributions over the label space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the "entries sum to one" invariant.
const SUM_TOLERANCE: f64 = 1e-9;

/// A probability distribution over the `K` classes of a label space.
///
/// Used for both domains' class priors and for their estimates. Construction
/// validates the simplex invariants, so a held `LabelDistribution` is always
/// a valid probability vector with `K >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entries must be finite and non-negative, got {p}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries must sum to 1 within {SUM_TOLERANCE}, got {sum}"
            )));
        }
        Ok(Self { probs })
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Normalizes raw per-class counts into a distribution.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("all class counts are zero"));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights must have positive finite sum, got {total}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(dist: LabelDistribution) -> Self {
        dist.probs
    }
}

/// Total variation style L1 distance between two distributions over the same
/// label space.
pub fn l1_distance(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "distributions have {} and {} classes",
            a.num_classes(),
            b.num_classes()
        )));
    }
    Ok(a.probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| (x - y).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_entries() {
        assert!(LabelDistribution::new(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn rejects_bad_sum() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn rejects_single_class() {
        assert!(LabelDistribution::new(vec![1.0]).is_err());
    }

    #[test]
    fn l1_of_identical_is_zero() {
        let d = LabelDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(l1_distance(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn l1_of_disjoint_is_two() {
        let a = LabelDistribution::new(vec![1.0, 0.0]).unwrap();
        let b = LabelDistribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn l1_hand_value() {
        let a = LabelDistribution::new(vec![0.6, 0.4]).unwrap();
        let b = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((l1_distance(&a, &b).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn l1_rejects_mismatched_k() {
        let a = LabelDistribution::uniform(2).unwrap();
        let b = LabelDistribution::uniform(3).unwrap();
        assert!(l1_distance(&a, &b).is_err());
    }

    #[test]
    fn from_counts_normalizes() {
        let d = LabelDistribution::from_counts(&[3, 1]).unwrap();
        assert_eq!(d.probs(), &[0.75, 0.25]);
    }
}
