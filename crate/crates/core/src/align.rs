//! Class-conditional adversarial feature alignment.
//!
//! A discriminator with a `2K`-way head scores the joint (domain, class) of
//! every pixel's extractor features, flattened as `domain * K + class` with
//! domain 0 = source and 1 = target. The extractor is trained to make target
//! features score as source features of the same class; the discriminator is
//! trained to tell the domains apart per class. Per-pixel class knowledge
//! weights the terms: ground-truth one-hots on the source side, the current
//! softmax predictions on the target side.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{softmax_rows, LabelMap, ProbMap, IGNORE_LABEL};
use crate::net::{sgd_step, sgd_step_mlp, Mlp, OptimizerState, PixelNet, DEFAULT_BASE_LR};
use crate::rng::{mix_seed, rng_from_seed};
use crate::synth::DomainDataset;

/// The (domain, class) discriminator: an affine stack from the extractor
/// width to `2K` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    mlp: Mlp,
    num_classes: usize,
}

impl Discriminator {
    /// Standard architecture: `h -> 32 -> 2K`.
    pub fn standard(hidden_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mlp = Mlp::init(&[hidden_dim, 32, 2 * num_classes], rng)?;
        Ok(Self { mlp, num_classes })
    }

    pub fn from_mlp(mlp: Mlp, num_classes: usize) -> Result<Self> {
        if mlp.output_dim() != 2 * num_classes {
            return Err(Error::DimensionMismatch(format!(
                "discriminator output dim {} is not 2K for K = {num_classes}",
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp, num_classes })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Joint (domain, class) probabilities for flat `(N, h)` features.
    pub fn predict(&self, hidden: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(self.mlp.forward(hidden)?.output()))
    }
}

/// Per-pixel class weights feeding the conditional losses. Rows sum to one
/// for scored pixels; excluded pixels (ignore-labeled) carry all-zero rows
/// and contribute to no sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKnowledge {
    weights: Array2<f64>,
}

impl ClassKnowledge {
    /// Builds knowledge from explicit per-pixel weights. Every row must be
    /// a simplex point or all zeros (an excluded pixel).
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        for row in weights.rows() {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidParameter(
                    "class knowledge weights must be finite and non-negative".into(),
                ));
            }
            let sum: f64 = row.sum();
            if sum != 0.0 && (sum - 1.0).abs() > 1e-7 {
                return Err(Error::InvalidParameter(format!(
                    "class knowledge rows must sum to 1 (or 0 when excluded), got {sum}"
                )));
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Number of pixels carrying weight.
    pub fn scored_pixels(&self) -> usize {
        self.weights
            .rows()
            .into_iter()
            .filter(|r| r.sum() > 0.0)
            .count()
    }
}

/// Source-side class knowledge: the ground-truth one-hot per pixel.
pub fn class_knowledge_source(labels: &LabelMap, num_classes: usize) -> ClassKnowledge {
    let (h, w) = labels.dim();
    let mut weights = Array2::zeros((h * w, num_classes));
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != IGNORE_LABEL {
            weights[(i, l as usize)] = 1.0;
        }
    }
    ClassKnowledge { weights }
}

/// Target-side class knowledge: the model's current per-pixel prediction.
pub fn class_knowledge_target(probs: &ProbMap) -> ClassKnowledge {
    let (h, w, k) = probs.dim();
    let weights = probs
        .values()
        .to_shape((h * w, k))
        .expect("probability map is contiguous")
        .to_owned();
    ClassKnowledge { weights }
}

fn check_joint_shape(d_probs: &Array2<f64>, knowledge: &ClassKnowledge) -> Result<()> {
    if d_probs.ncols() != 2 * knowledge.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "discriminator output has {} columns, expected 2K = {}",
            d_probs.ncols(),
            2 * knowledge.num_classes()
        )));
    }
    if d_probs.nrows() != knowledge.weights().nrows() {
        return Err(Error::ShapeMismatch(format!(
            "discriminator output has {} rows, class knowledge has {}",
            d_probs.nrows(),
            knowledge.weights().nrows()
        )));
    }
    Ok(())
}

/// Weighted negative log-likelihood of one domain half of the joint head:
/// `-sum_i sum_k a_ik * log d_probs[i, domain*K + k]`, averaged per scored
/// pixel. Returns the loss and the fused gradient at the discriminator's raw
/// scores (valid because the probabilities are that head's softmax).
fn joint_nll_and_grad(
    d_probs: &Array2<f64>,
    knowledge: &ClassKnowledge,
    domain: usize,
) -> (f64, Array2<f64>) {
    let k = knowledge.num_classes();
    let offset = domain * k;
    let scored = knowledge.scored_pixels();
    if scored == 0 {
        return (0.0, Array2::zeros(d_probs.dim()));
    }
    let inv_n = 1.0 / scored as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(d_probs.dim());
    for (i, row) in knowledge.weights().rows().into_iter().enumerate() {
        let row_sum: f64 = row.sum();
        if row_sum == 0.0 {
            continue;
        }
        for (c, &a) in row.iter().enumerate() {
            if a > 0.0 {
                loss -= a * d_probs[(i, offset + c)].ln();
            }
        }
        // d/dz of -sum_k a_k ln softmax(z)_(offset+k) is (sum a) p - t.
        for j in 0..d_probs.ncols() {
            let t = if j >= offset && j < offset + k {
                row[j - offset]
            } else {
                0.0
            };
            grad[(i, j)] = (row_sum * d_probs[(i, j)] - t) * inv_n;
        }
    }
    (loss * inv_n, grad)
}

/// Discriminator loss over both domains: source pixels against the
/// `(d=0, class)` entries, target pixels against `(d=1, class)`, each half
/// averaged per scored pixel. Gradients are returned at the discriminator's
/// raw scores only; the feature inputs are treated as constants.
pub fn loss_discriminator(
    d_probs_src: &Array2<f64>,
    a_src: &ClassKnowledge,
    d_probs_tgt: &Array2<f64>,
    a_tgt: &ClassKnowledge,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_joint_shape(d_probs_src, a_src)?;
    check_joint_shape(d_probs_tgt, a_tgt)?;
    if a_src.num_classes() != a_tgt.num_classes() {
        return Err(Error::DimensionMismatch(
            "source and target class knowledge disagree on K".into(),
        ));
    }
    let (loss_src, grad_src) = joint_nll_and_grad(d_probs_src, a_src, 0);
    let (loss_tgt, grad_tgt) = joint_nll_and_grad(d_probs_tgt, a_tgt, 1);
    Ok((loss_src + loss_tgt, grad_src, grad_tgt))
}

/// Adversarial loss on target pixels: their class-weighted likelihood under
/// the source half of the joint head. Minimizing it over the extractor makes
/// target features indistinguishable from source features of the same class.
/// Returns the loss and the fused gradient at the discriminator's raw
/// scores; chain it through the discriminator to reach the features.
pub fn loss_adversarial(
    d_probs_tgt: &Array2<f64>,
    a_tgt: &ClassKnowledge,
) -> Result<(f64, Array2<f64>)> {
    check_joint_shape(d_probs_tgt, a_tgt)?;
    let (loss, grad) = joint_nll_and_grad(d_probs_tgt, a_tgt, 0);
    Ok((loss, grad))
}

/// Adversarial loss evaluated end to end: forwards the features through the
/// discriminator and chains the fused gradient back to the feature inputs.
/// Discriminator parameters are treated as constants.
pub fn adversarial_feature_gradient(
    disc: &Discriminator,
    hidden: &Array2<f64>,
    a_tgt: &ClassKnowledge,
) -> Result<(f64, Array2<f64>)> {
    let cache = disc.mlp.forward(hidden)?;
    let d_probs = softmax_rows(cache.output());
    let (loss, d_scores) = loss_adversarial(&d_probs, a_tgt)?;
    let (_, g_features) = disc.mlp.backward(&cache, &d_scores);
    Ok((loss, g_features))
}

/// Settings of the adversarial stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Weight of the adversarial term in the extractor/classifier step;
    /// zero disables alignment and the loop degenerates to source-only
    /// training.
    pub lambda_adv: f64,
    pub iterations: usize,
    pub discriminator_lr: f64,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_adv.is_finite() || self.lambda_adv < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda_adv must be finite and non-negative, got {}",
                self.lambda_adv
            )));
        }
        if !self.discriminator_lr.is_finite() || self.discriminator_lr < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "discriminator_lr must be finite and non-negative, got {}",
                self.discriminator_lr
            )));
        }
        Ok(())
    }
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.1,
            iterations: 3000,
            discriminator_lr: 1e-3,
        }
    }
}

/// One row of the emitted loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_seg: f64,
    pub l_adv: f64,
    pub l_d: f64,
}

/// Joint training loop: each iteration takes one (source, target) scene
/// pair, updates the network on the segmentation loss plus the
/// `lambda_adv`-scaled adversarial loss in a single backward pass (the
/// adversarial gradient is injected at the extractor/head boundary), then
/// updates the discriminator on its own loss computed from the refreshed
/// features. Scene pairing cycles both datasets in order; the provided seed
/// only controls the discriminator's initialization, so runs are
/// deterministic.
pub fn train_conditional_alignment(
    src: &DomainDataset,
    tgt: &DomainDataset,
    net: &mut PixelNet,
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Discriminator, Vec<LossRecord>)> {
    cfg.validate()?;
    if src.scenes.is_empty() || tgt.scenes.is_empty() {
        return Err(Error::EmptyInput("alignment needs scenes in both domains"));
    }
    if src.spec.num_classes != tgt.spec.num_classes || src.spec.feature_dim != tgt.spec.feature_dim {
        return Err(Error::DimensionMismatch(
            "source and target domains must share K and feature_dim".into(),
        ));
    }
    let k = src.spec.num_classes;
    if net.num_classes() != k || net.feature_dim() != src.spec.feature_dim {
        return Err(Error::DimensionMismatch(
            "network dims do not match the datasets".into(),
        ));
    }

    let mut disc = Discriminator::standard(net.hidden_dim(), k, rng)?;
    let mut net_opt = OptimizerState::new(net.mlp(), DEFAULT_BASE_LR, cfg.iterations.max(1));
    let mut disc_opt = OptimizerState::new(disc.mlp(), cfg.discriminator_lr, cfg.iterations.max(1));
    let mut history = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let scene_s = &src.scenes[iter % src.scenes.len()];
        let scene_t = &tgt.scenes[iter % tgt.scenes.len()];
        let (h, w) = scene_s.labels.dim();

        // Network step: L_seg on source plus lambda_adv * L_adv on target.
        let cache_s = net.forward_cached(&scene_s.features)?;
        let logits_s = crate::maps::LogitMap::new(
            cache_s
                .output()
                .clone()
                .into_shape_with_order((h, w, k))
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
        )?;
        let (l_seg, d_logits) = crate::net::ce_loss_and_grad(&logits_s, &scene_s.labels)?;
        let mut grads = net.backward(&cache_s, &crate::net::flatten_grad(&d_logits));

        let cache_t = net.forward_cached(&scene_t.features)?;
        let a_tgt = ClassKnowledge {
            weights: softmax_rows(cache_t.output()),
        };
        let hidden_t = cache_t.activation(net.split_index());
        let (l_adv, g_hidden) = adversarial_feature_gradient(&disc, hidden_t, &a_tgt)?;
        let mut adv_grads = net.backward_from_split(&cache_t, &g_hidden);
        adv_grads.scale(cfg.lambda_adv);
        grads.add(&adv_grads);
        sgd_step(net, &grads, &mut net_opt)?;

        // Discriminator step on the refreshed features; gradients flow only
        // into the discriminator.
        let cache_s2 = net.forward_cached(&scene_s.features)?;
        let cache_t2 = net.forward_cached(&scene_t.features)?;
        let a_src = class_knowledge_source(&scene_s.labels, k);
        let a_tgt2 = ClassKnowledge {
            weights: softmax_rows(cache_t2.output()),
        };
        let d_cache_s = disc.mlp.forward(cache_s2.activation(net.split_index()))?;
        let d_cache_t = disc.mlp.forward(cache_t2.activation(net.split_index()))?;
        let d_probs_s = softmax_rows(d_cache_s.output());
        let d_probs_t = softmax_rows(d_cache_t.output());
        let (l_d, g_s, g_t) = loss_discriminator(&d_probs_s, &a_src, &d_probs_t, &a_tgt2)?;
        let (mut d_grads, _) = disc.mlp.backward(&d_cache_s, &g_s);
        let (d_grads_t, _) = disc.mlp.backward(&d_cache_t, &g_t);
        d_grads.add(&d_grads_t);
        sgd_step_mlp(&mut disc.mlp, &d_grads, &mut disc_opt)?;

        history.push(LossRecord {
            iteration: iter,
            l_seg,
            l_adv,
            l_d,
        });
    }
    Ok((disc, history))
}

/// Balanced-sample linear domain probe.
///
/// Conditional alignment is measured controlling for the class: the probe's
/// train and eval sets draw the same number of pixels per (domain, class)
/// via seeded reservoir sampling, so the class-prior channel cannot leak
/// domain identity. A fresh one-layer head is trained on the frozen boundary
/// activations; the returned value is its held-out accuracy, ~0.5 when the
/// per-class feature distributions coincide.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_per_class: 1200,
            eval_per_class: 600,
            iterations: 400,
            learning_rate: 0.5,
            seed: 0x50_B0BE,
        }
    }
}

/// Reservoir-samples `quota` rows per class of boundary activations.
fn sample_hidden_by_class(
    net: &PixelNet,
    ds: &DomainDataset,
    quota: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    use rand::Rng;
    let k = ds.spec.num_classes;
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(quota); k];
    let mut seen = vec![0usize; k];
    for scene in &ds.scenes {
        let cache = net.forward_cached(&scene.features)?;
        let hidden = cache.activation(net.split_index());
        for (i, &label) in scene.labels.labels().iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            let class = label as usize;
            seen[class] += 1;
            let row = || hidden.row(i).to_vec();
            if buckets[class].len() < quota {
                buckets[class].push(row());
            } else {
                let j = rng.gen_range(0..seen[class]);
                if j < quota {
                    buckets[class][j] = row();
                }
            }
        }
    }
    Ok(buckets)
}

fn probe_matrix(
    net: &PixelNet,
    src: &DomainDataset,
    tgt: &DomainDataset,
    quota: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<u8>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut domains: Vec<u8> = Vec::new();
    for (domain, ds) in [(0u8, src), (1u8, tgt)] {
        for bucket in sample_hidden_by_class(net, ds, quota, rng)? {
            for row in bucket {
                rows.push(row);
                domains.push(domain);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("probe found no scored pixels"));
    }
    let dim = rows[0].len();
    let mut matrix = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            matrix[(i, j)] = *v;
        }
    }
    Ok((matrix, domains))
}

/// Trains the probe on `train_*` scenes and reports accuracy on `eval_*`
/// scenes. Both domains' scenes must already be generated with labels.
pub fn domain_probe_accuracy(
    net: &PixelNet,
    train_src: &DomainDataset,
    train_tgt: &DomainDataset,
    eval_src: &DomainDataset,
    eval_tgt: &DomainDataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let mut sample_rng = rng_from_seed(mix_seed(cfg.seed, 1));
    let (train_x, train_y) = probe_matrix(net, train_src, train_tgt, cfg.train_per_class, &mut sample_rng)?;
    let mut eval_rng = rng_from_seed(mix_seed(cfg.seed, 2));
    let (eval_x, eval_y) = probe_matrix(net, eval_src, eval_tgt, cfg.eval_per_class, &mut eval_rng)?;

    let mut init_rng = rng_from_seed(mix_seed(cfg.seed, 3));
    let mut probe = Mlp::init(&[train_x.ncols(), 2], &mut init_rng)?;
    let mut opt = OptimizerState::new(&probe, cfg.learning_rate, cfg.iterations);
    opt.weight_decay = 0.0;

    let n = train_x.nrows();
    let labels = LabelMap::new(
        Array2::from_shape_vec((n, 1), train_y.clone()).expect("shape"),
        2,
    )?;
    for _ in 0..cfg.iterations {
        let cache = probe.forward(&train_x)?;
        let logits = crate::maps::LogitMap::new(
            cache
                .output()
                .clone()
                .into_shape_with_order((n, 1, 2))
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
        )?;
        let (_, grad) = crate::net::ce_loss_and_grad(&logits, &labels)?;
        let (grads, _) = probe.backward(&cache, &crate::net::flatten_grad(&grad));
        sgd_step_mlp(&mut probe, &grads, &mut opt)?;
    }

    let scores = probe.forward(&eval_x)?.output().clone();
    let correct = scores
        .rows()
        .into_iter()
        .zip(&eval_y)
        .filter(|(row, &y)| {
            let pred = if row[1] > row[0] { 1u8 } else { 0u8 };
            pred == y
        })
        .count();
    Ok(correct as f64 / eval_y.len() as f64)
}
