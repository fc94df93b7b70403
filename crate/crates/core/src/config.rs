//! Flat run configuration shared by every command. Unknown keys are rejected
//! so typos do not silently fall back to defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Preset};
use crate::sra::SraParams;
use crate::tracker::TrackerConfig;
use crate::train::{Phase, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,

    pub use_sra: bool,
    pub use_atm: bool,
    pub use_window: bool,
    pub freeze_on_absent: bool,
    pub timing: bool,
    pub f_base: f64,
    pub f_step: f64,
    pub f_max: f64,
    pub t_logits: f64,
    pub t_score: f64,

    pub w_giou: f64,
    pub w_l1: f64,
    pub w_focal: f64,
    pub w_logits: f64,
    pub w_mask: f64,

    pub steps: usize,
    pub batch: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub positive_ratio: f64,
    pub phase: Phase,
    pub phase1_fraction: f64,
    pub search_factor_min: f64,
    pub search_factor_max: f64,
    pub center_jitter: f64,
    pub flip_prob: f64,
    pub brightness_jitter: f64,
    pub grad_clip: f64,
    pub probe_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sra = SraParams::default();
        let w = LossWeights::default();
        let t = TrainConfig::default();
        let tr = TrackerConfig::default();
        Self {
            preset: Preset::Toy,
            seed: 0,
            use_sra: tr.use_sra,
            use_atm: tr.use_atm,
            use_window: tr.use_window,
            freeze_on_absent: tr.freeze_on_absent,
            timing: tr.timing,
            f_base: sra.f_base,
            f_step: sra.f_step,
            f_max: sra.f_max,
            t_logits: sra.t_logits,
            t_score: sra.t_score,
            w_giou: w.giou,
            w_l1: w.l1,
            w_focal: w.focal,
            w_logits: w.logits,
            w_mask: w.mask,
            steps: t.steps,
            batch: t.batch,
            lr_backbone: t.lr_backbone,
            lr_heads: t.lr_heads,
            positive_ratio: t.positive_ratio,
            phase: t.phase,
            phase1_fraction: t.phase1_fraction,
            search_factor_min: t.search_factor_range[0],
            search_factor_max: t.search_factor_range[1],
            center_jitter: t.center_jitter,
            flip_prob: t.flip_prob,
            brightness_jitter: t.brightness_jitter,
            grad_clip: t.grad_clip,
            probe_pairs: t.probe_pairs,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::preset(self.preset)
    }

    pub fn sra(&self) -> SraParams {
        SraParams {
            f_base: self.f_base,
            f_step: self.f_step,
            f_max: self.f_max,
            t_logits: self.t_logits,
            t_score: self.t_score,
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            use_sra: self.use_sra,
            use_atm: self.use_atm,
            use_window: self.use_window,
            sra: self.sra(),
            freeze_on_absent: self.freeze_on_absent,
            timing: self.timing,
            keep_masks: false,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            giou: self.w_giou,
            l1: self.w_l1,
            focal: self.w_focal,
            logits: self.w_logits,
            mask: self.w_mask,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr_backbone: self.lr_backbone,
            lr_heads: self.lr_heads,
            positive_ratio: self.positive_ratio,
            phase: self.phase,
            phase1_fraction: self.phase1_fraction,
            weights: self.weights(),
            search_factor_range: [self.search_factor_min, self.search_factor_max],
            center_jitter: self.center_jitter,
            flip_prob: self.flip_prob,
            brightness_jitter: self.brightness_jitter,
            grad_clip: self.grad_clip,
            probe_pairs: self.probe_pairs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Checks every derived config. Learning rates must be positive here; the
    /// library accepts 0 for frozen-run experiments.
    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.sra().validate()?;
        self.train().validate()?;
        if !(self.lr_backbone > 0.0 && self.lr_heads > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let w = self.weights();
        if [w.giou, w.l1, w.focal, w.logits, w.mask].iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
