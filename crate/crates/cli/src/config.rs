//! Declarative experiment configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use labelshift_core::align::AlignConfig;
use labelshift_core::estimate::{EstimationConfig, OutputSpace};
use labelshift_core::rng::mix_seed;
use labelshift_core::synth::SceneSpec;

use crate::error::{CliError, Result};

/// Sub-stream indices for seed derivation; part of the reproducibility
/// contract.
pub mod streams {
    pub const SOURCE_TRAIN: u64 = 1;
    pub const SOURCE_EVAL: u64 = 2;
    pub const TARGET_TRAIN: u64 = 3;
    pub const TARGET_EVAL: u64 = 4;
    pub const NET_INIT: u64 = 5;
    pub const DISCRIMINATOR: u64 = 6;
    pub const REFINEMENT: u64 = 7;
    pub const PROBE: u64 = 8;
}

/// One domain: its generative spec plus the train/eval scene counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub spec: SceneSpec,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

/// Training-time correction of the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingRule {
    #[default]
    None,
    /// Retrain the head with predictions remolded by the prior ratio; the
    /// refined head is used raw at inference.
    PosteriorRefinement,
    /// Retrain the head with the prior ratio as a per-class loss weight.
    LossReweighting,
}

/// Inference-time correction of the predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceRule {
    #[default]
    None,
    /// Scale predicted posteriors by the target/source prior ratio before
    /// the argmax.
    PriorScaling,
}

/// Which corrections a run applies. Training-time and inference-time
/// corrections are mutually exclusive: each alone recovers the target
/// classifier, so stacking them corrects twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RectificationSpec {
    #[serde(default)]
    pub training: TrainingRule,
    #[serde(default)]
    pub inference: InferenceRule,
}

impl RectificationSpec {
    pub const NONE: Self = Self {
        training: TrainingRule::None,
        inference: InferenceRule::None,
    };

    pub fn validate(&self) -> Result<()> {
        if self.training != TrainingRule::None && self.inference != InferenceRule::None {
            return Err(CliError::InvalidConfig(
                "training-time and inference-time rectification are mutually exclusive; \
                 enable at most one"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Report label of the corrected variant, if any.
    pub fn variant_name(&self) -> Option<&'static str> {
        match (self.training, self.inference) {
            (TrainingRule::None, InferenceRule::None) => None,
            (TrainingRule::PosteriorRefinement, _) => Some("posterior_refinement"),
            (TrainingRule::LossReweighting, _) => Some("loss_reweighting"),
            (_, InferenceRule::PriorScaling) => Some("prior_scaling"),
        }
    }
}

/// Estimation settings plus the model the target estimate is read from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationSettings {
    /// Strict pixel threshold; `null` selects 0.1% of the scene area.
    pub min_pixels: Option<u64>,
    #[serde(default)]
    pub output_space: OutputSpace,
    /// Estimate from the exact posterior of the source generative model
    /// instead of the trained network.
    #[serde(default)]
    pub use_oracle_model: bool,
}

impl EstimationSettings {
    pub fn resolve(&self, height: usize, width: usize) -> EstimationConfig {
        EstimationConfig {
            min_pixels: self
                .min_pixels
                .unwrap_or_else(|| EstimationConfig::default_min_pixels(height, width)),
            output_space: self.output_space,
        }
    }
}

/// A full experiment: generate, train, estimate, rectify, evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Preset label recorded in reports ("E1", "E2", "E3", or "custom").
    pub preset: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub align: AlignConfig,
    pub estimation: EstimationSettings,
    #[serde(default)]
    pub rectification: RectificationSpec,
    /// Correct with estimated distributions instead of the generative
    /// ground-truth marginals.
    pub use_estimated_distributions: bool,
    /// Epochs of head retraining when a training rule is enabled.
    pub refine_epochs: usize,
}

impl ExperimentConfig {
    /// Validates the whole configuration before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.source.spec.validate()?;
        self.target.spec.validate()?;
        if self.source.spec.num_classes != self.target.spec.num_classes
            || self.source.spec.feature_dim != self.target.spec.feature_dim
        {
            return Err(CliError::InvalidConfig(
                "source and target specs must share num_classes and feature_dim".into(),
            ));
        }
        if self.source.train_scenes == 0
            || self.source.eval_scenes == 0
            || self.target.train_scenes == 0
            || self.target.eval_scenes == 0
        {
            return Err(CliError::InvalidConfig(
                "every dataset split needs at least one scene".into(),
            ));
        }
        self.align.validate()?;
        self.rectification.validate()?;
        if self.rectification.training != TrainingRule::None && self.refine_epochs == 0 {
            return Err(CliError::InvalidConfig(
                "a training-time rectification rule needs refine_epochs >= 1".into(),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::InvalidConfig("output_dir is empty".into()));
        }
        Ok(())
    }

    /// Applies the seed override and re-derives the per-domain generator
    /// seeds from the run seed. Dataset seeds in the file are placeholders;
    /// deriving them here keeps `--seed` meaningful across every stage.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(seed) = seed_override {
            self.seed = seed;
        }
        self.source.spec.seed = mix_seed(self.seed, streams::SOURCE_TRAIN);
        self.target.spec.seed = mix_seed(self.seed, streams::TARGET_TRAIN);
        if let Ok(root) = std::env::var(crate::OUTPUT_ROOT_ENV) {
            if self.output_dir.is_relative() && !root.is_empty() {
                self.output_dir = PathBuf::from(root).join(&self.output_dir);
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Spec of a named split, seeded with its own sub-stream.
    pub fn split_spec(&self, split: Split) -> SceneSpec {
        let (base, stream) = match split {
            Split::SourceTrain => (&self.source.spec, streams::SOURCE_TRAIN),
            Split::SourceEval => (&self.source.spec, streams::SOURCE_EVAL),
            Split::TargetTrain => (&self.target.spec, streams::TARGET_TRAIN),
            Split::TargetEval => (&self.target.spec, streams::TARGET_EVAL),
        };
        let mut spec = base.clone();
        spec.seed = mix_seed(self.seed, stream);
        spec
    }

    pub fn split_count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source.train_scenes,
            Split::SourceEval => self.source.eval_scenes,
            Split::TargetTrain => self.target.train_scenes,
            Split::TargetEval => self.target.eval_scenes,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// The four generated dataset splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceEval,
    TargetTrain,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::SourceEval,
        Split::TargetTrain,
        Split::TargetEval,
    ];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceEval => "source_eval",
            Split::TargetTrain => "target_train",
            Split::TargetEval => "target_eval",
        }
    }
}
