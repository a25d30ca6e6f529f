//! Segmentation metrics: confusion matrix, per-class IoU, mean IoU.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::maps::{LabelMap, IGNORE_LABEL};
use crate::synth::{DomainDataset, Scene};

/// A `K x K` confusion matrix; `counts[(g, p)]` is the number of scored
/// pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[(gt, pred)]
    }

    /// Total number of scored pixels accumulated so far.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Fraction of scored pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("no scored pixels accumulated"));
        }
        let correct: u64 = (0..self.num_classes()).map(|k| self.counts[(k, k)]).sum();
        Ok(correct as f64 / total as f64)
    }
}

/// Accumulates one prediction/ground-truth pair into the confusion matrix.
/// Pixels whose ground truth is [`IGNORE_LABEL`] are skipped.
pub fn accumulate_confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (g, p) = (g as usize, p as usize);
        if g >= cm.num_classes() || p >= cm.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "label pair ({g}, {p}) out of range for {} classes",
                cm.num_classes()
            )));
        }
        cm.counts[(g, p)] += 1;
    }
    Ok(())
}

/// Per-class IoU: `TP / (TP + FP + FN)`. Classes that appear in neither the
/// ground truth nor the predictions have an empty union and are `None`.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.num_classes();
    (0..k)
        .map(|c| {
            let tp = cm.counts[(c, c)];
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.counts[(g, c)]).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.counts[(c, p)]).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                None
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect()
}

/// Mean IoU over the classes whose IoU is defined.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let defined: Vec<f64> = iou_per_class(cm).into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("IoU is undefined for every class"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Summary of one prediction rule scored against a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub confusion: ConfusionMatrix,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Scores an arbitrary per-scene prediction rule over every scene of a
/// labeled dataset.
pub fn evaluate_scenes(
    ds: &DomainDataset,
    mut predict: impl FnMut(&Scene) -> Result<LabelMap>,
) -> Result<EvalMetrics> {
    if ds.scenes.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset has no scenes"));
    }
    let mut cm = ConfusionMatrix::new(ds.spec.num_classes);
    for scene in &ds.scenes {
        let pred = predict(scene)?;
        accumulate_confusion(&pred, &scene.labels, &mut cm)?;
    }
    Ok(EvalMetrics {
        per_class_iou: iou_per_class(&cm),
        miou: miou(&cm)?,
        pixel_accuracy: cm.pixel_accuracy()?,
        confusion: cm,
    })
}
