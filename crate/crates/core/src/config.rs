//! Run configuration: every tunable of the data, model, meta-learner and
//! evaluation protocol, loaded from TOML with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::UpdateOrder;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mirror: bool,
    pub translate: bool,
    pub rotate: bool,
    /// Largest translation in input pixels.
    pub max_translate_px: u32,
    /// In-plane rotations are drawn from `[-max_inplane_deg, max_inplane_deg]`.
    pub max_inplane_deg: f64,
    /// Probability of each transform being applied to a sample.
    pub prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror: true,
            translate: true,
            rotate: true,
            max_translate_px: 2,
            max_inplane_deg: 60.0,
            prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub heatmap_size: usize,
    pub nc_min: usize,
    pub nc_max: usize,
    pub train_categories: usize,
    pub test_categories: usize,
    /// Canonical units to heatmap-grid units.
    pub object_scale: f64,
    pub noise_sigma: f64,
    /// Random strokes per image.
    pub distractors: usize,
    pub augment: AugmentConfig,
    /// Samples per category written by `gen-data`.
    pub dump_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 32,
            heatmap_size: 16,
            nc_min: 5,
            nc_max: 12,
            train_categories: 40,
            test_categories: 10,
            object_scale: 6.0,
            noise_sigma: 0.03,
            distractors: 2,
            augment: AugmentConfig::default(),
            dump_samples: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthReadout {
    /// `d = Σ h·c`
    Weighted,
    /// `d = Σ c`
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// High-level feature channels F (the stack has F + 1 channels).
    pub feature_channels: usize,
    /// Output channels of the category-specific extractor.
    pub category_channels: usize,
    pub depth_readout: DepthReadout,
    /// Use unsquared Euclidean distances in the regression losses.
    pub unsquared_l2: bool,
    /// Width (heatmap cells) of the Gaussian peaks supervising the general-keypoint channel.
    pub kp_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv1_channels: 8,
            conv2_channels: 16,
            feature_channels: 8,
            category_channels: 8,
            depth_readout: DepthReadout::Weighted,
            unsquared_l2: false,
            kp_sigma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l2d: f64,
    pub l3d: f64,
    pub ld: f64,
    pub lcon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l2d: 50.0, l3d: 1.0, ld: 0.2, lcon: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("l2d", self.l2d), ("l3d", self.l3d), ("ld", self.ld), ("lcon", self.lcon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Supervised pre-training of the feature block and the fixed-slot baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Detector heads of the fixed-slot network.
    pub slots: usize,
    pub kp_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { iterations: 1500, batch: 8, lr: 2e-3, slots: 8, kp_weight: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner SGD rate α.
    pub alpha: f64,
    pub outer_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Fraction of epochs trained with only the 2D and concentration terms.
    pub stage1_fraction: f64,
    pub shot: usize,
    pub query: usize,
    pub order: UpdateOrder,
    pub weights: LossWeights,
    /// SGD steps when adapting to a novel category.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Losses above this (or non-finite) abort training.
    pub divergence_limit: f64,
    /// Detector count of the non-replicated model used when meta-Siamese is off.
    pub fixed_heads: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.01,
            outer_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 60,
            decay_epochs: vec![40, 55],
            decay_factor: 0.5,
            stage1_fraction: 0.25,
            shot: 10,
            query: 3,
            order: UpdateOrder::SecondOrder,
            weights: LossWeights::default(),
            finetune_steps: 20,
            finetune_lr: 0.01,
            divergence_limit: 1e6,
            fixed_heads: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repetitions: usize,
    /// Held-out query images per test category.
    pub query_pool: usize,
    pub workers: usize,
    /// CI mode: exit nonzero when overall Acc30 falls below this.
    pub min_acc30: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { repetitions: 10, query_pool: 20, workers: 1, min_acc30: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    ///
    /// `out_dir` and `eval.workers` are excluded: they change where and how
    /// fast results are produced, not the results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.eval.workers = 1;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.data;
        if d.nc_min < 3 || d.nc_min > d.nc_max {
            return bad(format!("keypoint range {}..={} must satisfy 3 <= nc_min <= nc_max", d.nc_min, d.nc_max));
        }
        if d.heatmap_size < 4 || !d.image_size.is_multiple_of(d.heatmap_size) || d.image_size / d.heatmap_size != 2 {
            return bad(format!(
                "image_size {} must be twice heatmap_size {} (one stride-2 layer)",
                d.image_size, d.heatmap_size
            ));
        }
        if d.train_categories < 2 || d.test_categories < 1 {
            return bad("need at least 2 training and 1 test category".into());
        }
        let half = (d.heatmap_size as f64 - 1.0) / 2.0;
        if !(d.object_scale > 0.0) || d.object_scale >= half {
            return bad(format!("object_scale {} must lie in (0, {half})", d.object_scale));
        }
        if !(0.0..=1.0).contains(&d.augment.prob) {
            return bad(format!("augment.prob {} must lie in [0, 1]", d.augment.prob));
        }
        let m = &self.meta;
        if !(m.alpha > 0.0) {
            return bad(format!("meta.alpha {} must be positive", m.alpha));
        }
        if !(0.0..=1.0).contains(&m.stage1_fraction) {
            return bad(format!("meta.stage1_fraction {} must lie in [0, 1]", m.stage1_fraction));
        }
        if m.shot == 0 || m.query == 0 {
            return bad("meta.shot and meta.query must be at least 1".into());
        }
        if m.fixed_heads < d.nc_max {
            return bad(format!("meta.fixed_heads {} must cover nc_max {}", m.fixed_heads, d.nc_max));
        }
        m.weights.validate()?;
        if self.pretrain.slots < 3 {
            return bad("pretrain.slots must be at least 3".into());
        }
        if self.eval.repetitions == 0 || self.eval.query_pool == 0 {
            return bad("eval.repetitions and eval.query_pool must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = RunConfig::from_toml("seed = 3\n[meta]\nalpah = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn hash_tracks_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.meta.weights.lcon = 0.0;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.out_dir = Some("/tmp/x".into());
        c.eval.workers = 4;
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("[meta]\nshot = 5\n").unwrap();
        assert_eq!(c.meta.shot, 5);
        assert_eq!(c.meta.alpha, 0.01);
    }
}
