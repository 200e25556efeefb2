use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, PixelWeights};
use crate::hashenc::HASH_GROUP;
use crate::model::{ModelConfig, Variant};
use crate::synthdata::{read_json, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Single identity from randomly initialised codes.
    Scratch,
    /// Multi-identity training through the identity encoder.
    Pretrain,
    /// Continues a materialised pretrained model on one identity.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrRange {
    pub start: f64,
    pub end: f64,
}

impl LrRange {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// `start * (end/start)^(e/epochs)`, clamped to the schedule.
    pub fn at(&self, epoch: f64, epochs: f64) -> f64 {
        if epochs <= 0.0 {
            return self.start;
        }
        let f = (epoch / epochs).clamp(0.0, 1.0);
        if f == 0.0 {
            self.start
        } else if f == 1.0 {
            self.end
        } else {
            self.start * (self.end / self.start).powf(f)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub model: ModelConfig,
    pub epochs: f64,
    /// Optimiser steps per epoch; `None` means training pixels / batch rays.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    pub batch_rays: usize,
    /// Distinct frames contributing rays to one step.
    pub frames_per_batch: usize,
    /// Learning-rate range for groups not listed in `group_lr`.
    pub lr: LrRange,
    #[serde(default)]
    pub group_lr: BTreeMap<String, LrRange>,
    /// Groups that never update.
    #[serde(default)]
    pub frozen_groups: Vec<String>,
    pub adam: AdamConfig,
    pub losses: LossWeights,
    pub pixel_weights: PixelWeights,
    /// Side of the square patch rendered for the perceptual term.
    pub patch: usize,
    pub seed: u64,
    /// Identity trained by the scratch and fine-tune phases.
    pub identity: usize,
    /// Identities used for pretraining; empty means all.
    #[serde(default)]
    pub pretrain_identities: Vec<usize>,
    /// Fraction of the training frames used, taken from the start of the clip.
    pub frac: f64,
    /// Run a validation pass every this many steps (0 disables).
    #[serde(default)]
    pub eval_every: usize,
    /// Validation frames used by periodic evaluation; `None` means all.
    #[serde(default)]
    pub eval_frames: Option<usize>,
}

impl TrainConfig {
    pub fn pretrain(model: ModelConfig) -> Self {
        Self {
            phase: Phase::Pretrain,
            model,
            epochs: 50.0,
            steps_per_epoch: None,
            batch_rays: 4096,
            frames_per_batch: 4,
            lr: LrRange::new(1e-3, 1e-4),
            group_lr: BTreeMap::new(),
            frozen_groups: Vec::new(),
            adam: AdamConfig::default(),
            losses: LossWeights::default(),
            pixel_weights: PixelWeights::default(),
            patch: 8,
            seed: 0,
            identity: 0,
            pretrain_identities: Vec::new(),
            frac: 1.0,
            eval_every: 0,
            eval_frames: None,
        }
    }

    pub fn scratch(model: ModelConfig) -> Self {
        Self { phase: Phase::Scratch, ..Self::pretrain(model) }
    }

    pub fn finetune(model: ModelConfig) -> Self {
        let mut group_lr = BTreeMap::new();
        group_lr.insert(crate::model::ID_GROUP.to_string(), LrRange::new(1e-3, 1e-4));
        Self { phase: Phase::Finetune, epochs: 10.0, lr: LrRange::new(1e-4, 1e-5), group_lr, ..Self::pretrain(model) }
    }

    /// Defaults for a dataset: model resolution and background follow the manifest.
    pub fn for_dataset(phase: Phase, variant: Variant, ds: &Dataset) -> Self {
        let m = &ds.manifest;
        let mut model = ModelConfig::new(variant, m.width, m.height);
        model.signal_dims = m.signal_dims;
        model.background = quantized_background(m.background);
        match phase {
            Phase::Pretrain => Self::pretrain(model),
            Phase::Scratch => Self::scratch(model),
            Phase::Finetune => Self::finetune(model),
        }
    }

    /// Reduced schedule and network matching [`ModelConfig::desk`]: 512 rays per
    /// step and 3 epochs of 1000 steps. The canonical hash tables train ten times
    /// faster than the other groups.
    pub fn desk(phase: Phase, variant: Variant, ds: &Dataset) -> Self {
        let mut c = Self::for_dataset(phase, variant, ds);
        let m = &ds.manifest;
        c.model = ModelConfig { signal_dims: c.model.signal_dims, background: c.model.background, ..ModelConfig::desk(variant, m.width, m.height) };
        c.batch_rays = 512;
        c.steps_per_epoch = Some(1000);
        c.epochs = 3.0;
        c.group_lr.insert(HASH_GROUP.into(), LrRange::new(c.lr.start * 10.0, c.lr.end * 10.0));
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(c)
    }

    pub fn lr_range(&self, group: &str) -> LrRange {
        self.group_lr.get(group).copied().unwrap_or(self.lr)
    }

    pub fn lr_at(&self, group: &str, epoch: f64) -> f64 {
        self.lr_range(group).at(epoch, self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epochs > 0.0) || !self.epochs.is_finite() {
            return bad(format!("epochs must be positive, got {}", self.epochs));
        }
        if self.batch_rays == 0 || self.frames_per_batch == 0 || self.batch_rays < self.frames_per_batch {
            return bad(format!("batch of {} rays over {} frames", self.batch_rays, self.frames_per_batch));
        }
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return bad(format!("frac must lie in (0, 1], got {}", self.frac));
        }
        for (g, r) in std::iter::once(("default", &self.lr)).chain(self.group_lr.iter().map(|(k, v)| (k.as_str(), v))) {
            if !(r.start > 0.0 && r.end > 0.0) {
                return bad(format!("learning rates of group {g} must be positive"));
            }
        }
        if self.patch < 4 {
            return bad(format!("perceptual patch must be at least 4 pixels, got {}", self.patch));
        }
        Ok(())
    }
}

pub fn quantized_background(bg: [f64; 3]) -> [f64; 3] {
    bg.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let r = LrRange::new(1e-3, 1e-4);
        assert_eq!(r.at(0.0, 50.0), 1e-3);
        assert_eq!(r.at(50.0, 50.0), 1e-4);
        assert!((r.at(25.0, 50.0) - (1e-3f64 * 1e-4).sqrt()).abs() < 1e-12);
        assert!((r.at(25.0, 50.0) - 3.1623e-4).abs() < 1e-8);
    }

    #[test]
    fn schedule_is_monotone() {
        let r = LrRange::new(1e-3, 1e-4);
        let v: Vec<f64> = (0..=100).map(|i| r.at(i as f64 * 0.1, 10.0)).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn phase_defaults() {
        let m = ModelConfig::new(Variant::ODR, 64, 64);
        let p = TrainConfig::pretrain(m.clone());
        assert_eq!((p.epochs, p.lr_at("mlp", 0.0), p.lr_at("mlp", 50.0)), (50.0, 1e-3, 1e-4));
        let f = TrainConfig::finetune(m);
        assert_eq!(f.epochs, 10.0);
        assert_eq!((f.lr_at("id", 0.0), f.lr_at("id", 10.0)), (1e-3, 1e-4));
        assert_eq!((f.lr_at("hash", 0.0), f.lr_at("mlp", 10.0)), (1e-4, 1e-5));
    }

    #[test]
    fn desk_preset_speeds_up_only_the_hash_tables() {
        let ds = Dataset::generate(1, 2, 16, 16, 0).unwrap();
        let s = TrainConfig::desk(Phase::Scratch, Variant::OD, &ds);
        assert_eq!((s.lr_at("hash", 0.0), s.lr_at("deform", 0.0), s.lr_at("mlp", 3.0)), (1e-2, 1e-3, 1e-4));
        assert_eq!((s.model.width, s.model.samples_per_ray, s.model.variant), (16, 24, Variant::OD));
        let f = TrainConfig::desk(Phase::Finetune, Variant::ODR, &ds);
        assert_eq!((f.lr_at("hash", 0.0), f.lr_at("id", 0.0), f.lr_at("mlp", 0.0)), (1e-3, 1e-3, 1e-4));
        assert_eq!(f.steps_per_epoch, Some(1000));
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = TrainConfig::pretrain(ModelConfig::tiny(Variant::O, 16, 16));
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
        let mut bad = c.clone();
        bad.frac = 0.0;
        assert!(bad.validate().is_err());
        bad = c;
        bad.losses.alpha = -1.0;
        assert!(bad.validate().is_err());
    }
}
