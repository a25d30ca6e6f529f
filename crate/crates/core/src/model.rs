//! Scene-level prediction interface shared by trained networks and the
//! ground-truth oracle.

use ndarray::Array3;

use crate::error::Result;
use crate::maps::{softmax, LogitMap, ProbMap};

/// Anything that scores every pixel of a feature map. The softmax of the
/// returned logits is the model's posterior estimate.
pub trait SceneModel {
    fn predict_logits(&self, features: &Array3<f64>) -> Result<LogitMap>;

    fn predict_probs(&self, features: &Array3<f64>) -> Result<ProbMap> {
        Ok(softmax(&self.predict_logits(features)?))
    }
}
