//! Minimal differentiable per-pixel network with manual backpropagation.
//!
//! The network is a stack of affine layers with tanh between them, applied
//! pixelwise with no spatial mixing. A `split_index` divides the stack into
//! a feature extractor (layers below) and a classifier head (layers at and
//! above); the activations crossing that boundary are the "hidden" features
//! consumed by the domain discriminator and by gradient injection during
//! adversarial training.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{LabelMap, LogitMap, IGNORE_LABEL};
use crate::model::SceneModel;

/// Optimizer defaults: SGD with momentum 0.9, weight decay 1e-4, and
/// polynomial learning-rate decay of power 0.9 from a base rate of 2.5e-4.
pub const DEFAULT_BASE_LR: f64 = 2.5e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_POLY_POWER: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    /// Shape `(in_dim, out_dim)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }
}

/// Plain affine stack with tanh between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<AffineLayer>,
}

/// Activations recorded by a forward pass, consumed by backpropagation.
pub struct MlpCache {
    /// `inputs[i]` is the (post-activation) input of layer `i`, shape
    /// `(N, dims[i])`; `inputs[0]` is the raw network input.
    inputs: Vec<Array2<f64>>,
    /// Raw output of the final layer, shape `(N, dims.last())`.
    output: Array2<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Input of layer `index` (the activations crossing that boundary).
    pub fn activation(&self, index: usize) -> &Array2<f64> {
        &self.inputs[index]
    }
}

/// Per-parameter gradients matching an [`Mlp`] layer for layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<AffineLayer>,
}

impl GradientSet {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| AffineLayer {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weight *= factor;
            layer.bias *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// Builds the stack with weights uniform in `±1/sqrt(fan_in)` and zero
    /// biases.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "an affine stack needs at least input and output dims".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter("layer dims must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| AffineLayer::init(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("affine stack is empty".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::DimensionMismatch(
                    "adjacent layer dims disagree".into(),
                ));
            }
        }
        for layer in &layers {
            if layer.weight.ncols() != layer.bias.len() {
                return Err(Error::DimensionMismatch(
                    "bias length must equal layer output dim".into(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    /// Layer dims as `input -> hidden... -> output`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    /// Forward pass over `(N, input_dim)` rows, recording activations.
    pub fn forward(&self, input: &Array2<f64>) -> Result<MlpCache> {
        if input.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has dim {}, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(current);
            if i + 1 == self.layers.len() {
                return Ok(MlpCache { inputs, output: z });
            }
            current = z.mapv(f64::tanh);
        }
        unreachable!("stack validated non-empty");
    }

    /// Full reverse pass from a gradient at the raw output. Returns the
    /// parameter gradients and the gradient at the network input.
    pub fn backward(&self, cache: &MlpCache, d_output: &Array2<f64>) -> (GradientSet, Array2<f64>) {
        self.backprop(cache, self.layers.len(), d_output.clone(), 0)
    }

    /// Reverse pass from a gradient injected at the input of layer
    /// `boundary` (i.e. at the activations `cache.activation(boundary)`).
    /// Only layers below the boundary receive gradients.
    pub fn backward_from_activation(
        &self,
        cache: &MlpCache,
        boundary: usize,
        d_activation: &Array2<f64>,
    ) -> (GradientSet, Array2<f64>) {
        self.backprop(cache, boundary, d_activation.clone(), 0)
    }

    /// Reverse pass from the raw output that stops at layer `bottom`:
    /// layers below it keep exactly zero gradients.
    pub fn backward_above(
        &self,
        cache: &MlpCache,
        d_output: &Array2<f64>,
        bottom: usize,
    ) -> (GradientSet, Array2<f64>) {
        self.backprop(cache, self.layers.len(), d_output.clone(), bottom)
    }

    /// Shared reverse loop. `top` is the number of layers the arriving
    /// gradient has already passed: `top == num_layers` means `g` sits at
    /// the raw output, smaller values mean `g` sits at `inputs[top]`.
    /// Layers below `bottom` are skipped and keep zero gradients.
    fn backprop(
        &self,
        cache: &MlpCache,
        top: usize,
        mut g: Array2<f64>,
        bottom: usize,
    ) -> (GradientSet, Array2<f64>) {
        let mut grads = GradientSet::zeros_like(self);
        for i in (bottom..top).rev() {
            // The output layer has no activation; elsewhere dtanh = 1 - a^2
            // with a the recorded post-activation values.
            let dz = if i + 1 == self.layers.len() {
                g
            } else {
                let act = &cache.inputs[i + 1];
                g * act.mapv(|a| 1.0 - a * a)
            };
            grads.layers[i].weight = cache.inputs[i].t().dot(&dz);
            grads.layers[i].bias = dz.sum_axis(Axis(0));
            g = dz.dot(&self.layers[i].weight.t());
        }
        (grads, g)
    }
}

/// Per-pixel classifier `G = C ∘ F`: an affine stack whose layers below
/// `split_index` form the feature extractor `F` and the rest the classifier
/// head `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelNet {
    mlp: Mlp,
    split_index: usize,
}

impl PixelNet {
    /// Standard architecture: `d -> 32 -> 16 -> K` with the head split after
    /// the two extractor layers.
    pub fn standard(feature_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::init(&[feature_dim, 32, 16, num_classes], 2, rng)
    }

    pub fn init(dims: &[usize], split_index: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mlp = Mlp::init(dims, rng)?;
        Self::from_mlp(mlp, split_index)
    }

    pub fn from_mlp(mlp: Mlp, split_index: usize) -> Result<Self> {
        if split_index >= mlp.num_layers() {
            return Err(Error::InvalidParameter(format!(
                "split_index {split_index} leaves no classifier layer in a {}-layer net",
                mlp.num_layers()
            )));
        }
        Ok(Self { mlp, split_index })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Width of the activations at the extractor/head boundary.
    pub fn hidden_dim(&self) -> usize {
        self.mlp.dims()[self.split_index]
    }

    /// Flattens an `(H, W, d)` feature map to `(H*W, d)` rows and runs the
    /// stack, returning the recorded cache.
    pub fn forward_cached(&self, features: &Array3<f64>) -> Result<MlpCache> {
        let (h, w, d) = features.dim();
        let flat = features
            .to_shape((h * w, d))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?
            .to_owned();
        self.mlp.forward(&flat)
    }

    /// Forward pass returning the boundary activations and the logits, both
    /// in scene layout.
    pub fn forward(&self, features: &Array3<f64>) -> Result<(Array3<f64>, LogitMap)> {
        let (h, w, _) = features.dim();
        let cache = self.forward_cached(features)?;
        let hidden = cache
            .activation(self.split_index)
            .clone()
            .into_shape_with_order((h, w, self.hidden_dim()))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let logits = cache
            .output()
            .clone()
            .into_shape_with_order((h, w, self.num_classes()))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok((hidden, LogitMap::new(logits)?))
    }

    /// Reverse pass from a gradient at the logits.
    pub fn backward(&self, cache: &MlpCache, d_logits: &Array2<f64>) -> GradientSet {
        self.mlp.backward(cache, d_logits).0
    }

    /// Reverse pass from a gradient injected at the extractor/head boundary;
    /// only extractor layers receive gradients.
    pub fn backward_from_split(&self, cache: &MlpCache, d_hidden: &Array2<f64>) -> GradientSet {
        self.mlp
            .backward_from_activation(cache, self.split_index, d_hidden)
            .0
    }

    /// Reverse pass restricted to the classifier head: extractor layers keep
    /// exactly zero gradients.
    pub fn backward_head(&self, cache: &MlpCache, d_logits: &Array2<f64>) -> GradientSet {
        self.mlp.backward_above(cache, d_logits, self.split_index).0
    }
}

impl SceneModel for PixelNet {
    fn predict_logits(&self, features: &Array3<f64>) -> Result<LogitMap> {
        Ok(self.forward(features)?.1)
    }
}

/// Mean cross-entropy over scored pixels and its gradient at the logits.
/// The gradient of pixel `i` is `(softmax(z_i) - onehot(y_i)) / N_scored`;
/// ignored pixels carry zero gradient.
pub fn ce_loss_and_grad(logits: &LogitMap, labels: &LabelMap) -> Result<(f64, Array3<f64>)> {
    weighted_ce_loss_and_grad(logits, labels, |_| (0.0, 1.0))
}

/// Shared cross-entropy core: per-pixel the loss is
/// `w_y * (-log softmax(z + shift)[y])` where `(shift_k, w_y)` come from
/// `class_terms(k)` as `(logit shift of class k, loss weight of true class)`.
/// Plain CE uses zero shift and unit weight.
pub(crate) fn weighted_ce_loss_and_grad(
    logits: &LogitMap,
    labels: &LabelMap,
    class_terms: impl Fn(usize) -> (f64, f64),
) -> Result<(f64, Array3<f64>)> {
    let (h, w, k) = logits.dim();
    if labels.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "logits are {h}x{w} but labels are {:?}",
            labels.dim()
        )));
    }
    let scored = labels.scored_pixels();
    if scored == 0 {
        return Err(Error::NoScoredPixels);
    }
    let shifts: Vec<f64> = (0..k).map(|c| class_terms(c).0).collect();
    let inv_n = 1.0 / scored as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((h, w, k));
    let values = logits.values();
    let mut shifted = vec![0.0; k];
    for r in 0..h {
        for c in 0..w {
            let y = labels.labels()[(r, c)];
            if y == IGNORE_LABEL {
                continue;
            }
            let y = y as usize;
            for (j, s) in shifted.iter_mut().enumerate() {
                *s = values[(r, c, j)] + shifts[j];
            }
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = shifted.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            let weight = class_terms(y).1;
            loss += weight * (log_sum - shifted[y]);
            for j in 0..k {
                let p = (shifted[j] - max - (log_sum - max)).exp();
                let target = if j == y { 1.0 } else { 0.0 };
                grad[(r, c, j)] = weight * (p - target) * inv_n;
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Gradient reversal: identity in the forward direction by construction, the
/// backward signal is negated and scaled by `lambda_adv`.
pub fn grl_transform<D: ndarray::Dimension>(
    grad: &ndarray::Array<f64, D>,
    lambda_adv: f64,
) -> ndarray::Array<f64, D> {
    grad.mapv(|g| -lambda_adv * g)
}

/// SGD-with-momentum state and schedule: learning rate decays polynomially,
/// `lr = base_lr * (1 - iter/max_iters)^poly_power`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    buffers: Vec<AffineLayer>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iters: usize,
    pub iter: usize,
    /// Layers below this index are left untouched (frozen feature extractor
    /// during classifier refinement).
    pub frozen_below: usize,
}

impl OptimizerState {
    pub fn new(mlp: &Mlp, base_lr: f64, max_iters: usize) -> Self {
        Self {
            buffers: GradientSet::zeros_like(mlp).layers,
            base_lr,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            poly_power: DEFAULT_POLY_POWER,
            max_iters,
            iter: 0,
            frozen_below: 0,
        }
    }

    pub fn with_frozen_below(mut self, boundary: usize) -> Self {
        self.frozen_below = boundary;
        self
    }

    pub fn learning_rate(&self) -> f64 {
        let remaining = 1.0 - self.iter as f64 / self.max_iters as f64;
        self.base_lr * remaining.powf(self.poly_power)
    }
}

/// One optimizer step on a raw affine stack.
pub fn sgd_step_mlp(mlp: &mut Mlp, grads: &GradientSet, opt: &mut OptimizerState) -> Result<()> {
    if opt.iter >= opt.max_iters {
        return Err(Error::IterationsExhausted {
            iter: opt.iter,
            max_iters: opt.max_iters,
        });
    }
    if grads.layers.len() != mlp.num_layers() {
        return Err(Error::DimensionMismatch(
            "gradient set does not match network layout".into(),
        ));
    }
    let lr = opt.learning_rate();
    for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
        if i < opt.frozen_below {
            continue;
        }
        let buf = &mut opt.buffers[i];
        let g = &grads.layers[i];
        buf.weight *= opt.momentum;
        buf.weight.scaled_add(1.0, &g.weight);
        buf.weight.scaled_add(opt.weight_decay, &layer.weight);
        layer.weight.scaled_add(-lr, &buf.weight);

        buf.bias *= opt.momentum;
        buf.bias.scaled_add(1.0, &g.bias);
        buf.bias.scaled_add(opt.weight_decay, &layer.bias);
        layer.bias.scaled_add(-lr, &buf.bias);
    }
    opt.iter += 1;
    Ok(())
}

/// One optimizer step on a pixel network.
pub fn sgd_step(net: &mut PixelNet, grads: &GradientSet, opt: &mut OptimizerState) -> Result<()> {
    sgd_step_mlp(&mut net.mlp, grads, opt)
}

/// Flattens a scene-layout gradient to optimizer layout `(N, K)`.
pub fn flatten_grad(grad: &Array3<f64>) -> Array2<f64> {
    let (h, w, k) = grad.dim();
    grad.to_shape((h * w, k)).unwrap().to_owned()
}
