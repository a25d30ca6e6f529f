//! Independent oracles shared by the integration suites: central finite
//! differences for gradients, a straight-line forward evaluation, and a
//! set-based IoU computed directly on label maps. These deliberately avoid
//! the library's own computation paths.

// Each test binary uses its own subset.
#![allow(dead_code)]

use labelshift_core::maps::{LabelMap, IGNORE_LABEL};
use labelshift_core::net::{GradientSet, Mlp, PixelNet};
use ndarray::Array3;

/// Relative error with a floor guarding near-zero gradients.
pub fn rel_error(numerical: f64, analytical: f64) -> f64 {
    let denom = (numerical.abs() + analytical.abs()).max(1e-8);
    (numerical - analytical).abs() / denom
}

/// Central finite differences over every parameter of an affine stack.
/// Returns the worst relative error against the analytic gradients.
pub fn max_rel_error_mlp(
    mlp: &Mlp,
    loss: &dyn Fn(&Mlp) -> f64,
    analytic: &GradientSet,
    eps: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for li in 0..mlp.num_layers() {
        let (rows, cols) = mlp.layers()[li].weight.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = mlp.clone();
                plus.layers_mut()[li].weight[(r, c)] += eps;
                let mut minus = mlp.clone();
                minus.layers_mut()[li].weight[(r, c)] -= eps;
                let numerical = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                worst = worst.max(rel_error(numerical, analytic.layers[li].weight[(r, c)]));
            }
        }
        for b in 0..mlp.layers()[li].bias.len() {
            let mut plus = mlp.clone();
            plus.layers_mut()[li].bias[b] += eps;
            let mut minus = mlp.clone();
            minus.layers_mut()[li].bias[b] -= eps;
            let numerical = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            worst = worst.max(rel_error(numerical, analytic.layers[li].bias[b]));
        }
    }
    worst
}

/// Finite differences over a pixel network's parameters.
pub fn max_rel_error_net(
    net: &PixelNet,
    loss: &dyn Fn(&PixelNet) -> f64,
    analytic: &GradientSet,
    eps: f64,
) -> f64 {
    let split = net.split_index();
    let as_net = |mlp: &Mlp| PixelNet::from_mlp(mlp.clone(), split).unwrap();
    max_rel_error_mlp(net.mlp(), &|mlp| loss(&as_net(mlp)), analytic, eps)
}

/// Straight-line forward evaluation with plain loops: affine layers with
/// tanh between them, none after the last.
pub fn naive_forward(net: &PixelNet, features: &Array3<f64>) -> Array3<f64> {
    let (h, w, d) = features.dim();
    let layers = net.mlp().layers();
    let out_dim = layers.last().unwrap().weight.ncols();
    let mut output = Array3::zeros((h, w, out_dim));
    for r in 0..h {
        for c in 0..w {
            let mut x: Vec<f64> = (0..d).map(|j| features[(r, c, j)]).collect();
            for (li, layer) in layers.iter().enumerate() {
                let mut z = vec![0.0; layer.weight.ncols()];
                for (o, zo) in z.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (i, xi) in x.iter().enumerate() {
                        acc += xi * layer.weight[(i, o)];
                    }
                    *zo = acc;
                }
                if li + 1 < layers.len() {
                    for v in &mut z {
                        *v = v.tanh();
                    }
                }
                x = z;
            }
            for (k, v) in x.iter().enumerate() {
                output[(r, c, k)] = *v;
            }
        }
    }
    output
}

/// Set-based per-class IoU on raw label maps: `|pred ∩ gt| / |pred ∪ gt|`
/// over the scored (non-ignore ground truth) pixels.
pub fn brute_force_iou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes as u8)
        .map(|class| {
            let mut intersection = 0u64;
            let mut union = 0u64;
            for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
                if g == IGNORE_LABEL {
                    continue;
                }
                let in_pred = p == class;
                let in_gt = g == class;
                if in_pred && in_gt {
                    intersection += 1;
                }
                if in_pred || in_gt {
                    union += 1;
                }
            }
            if union == 0 {
                None
            } else {
                Some(intersection as f64 / union as f64)
            }
        })
        .collect()
}
