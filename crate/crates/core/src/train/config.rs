use std::path::PathBuf;

use crate::discriminator::PatchSpec;
use crate::error::{Error, Result};
use crate::losses::{LossForms, LossWeights};
use crate::window::PATCH_SIZE;

use super::adam::AdamHyper;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub adam: AdamHyper,
    pub crop_size: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub forms: LossForms,
    pub patches: PatchSpec,
    pub low_dir: PathBuf,
    pub normal_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-5,
            adam: AdamHyper::default(),
            crop_size: 64,
            batch_size: 4,
            total_steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            forms: LossForms::default(),
            patches: PatchSpec::default(),
            low_dir: PathBuf::from("data/low"),
            normal_dir: PathBuf::from("data/normal"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return fail(format!("lr_init {} must be positive", self.lr_init));
        }
        let AdamHyper { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return fail(format!("Adam betas ({beta1}, {beta2}) must lie in [0, 1)"));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return fail(format!("Adam eps {eps} must be positive"));
        }
        if self.crop_size == 0 || self.crop_size % PATCH_SIZE != 0 {
            return fail(format!(
                "crop_size {} must be a positive multiple of {PATCH_SIZE}",
                self.crop_size
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        let p = self.patches.side(self.crop_size);
        if p == 0 || p > self.crop_size || self.patches.count == 0 {
            return fail(format!(
                "local patches ({} of side {p}) do not fit a {} crop",
                self.patches.count, self.crop_size
            ));
        }
        self.weights.validate()
    }

    /// Learning rate for the update made at 0-based `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        learning_rate(self.lr_init, step, self.total_steps)
    }
}

/// Constant `lr_init` for the first half of training, then linear decay that
/// reaches zero at `total`.
pub fn learning_rate(lr_init: f64, step: u64, total: u64) -> f64 {
    let half = total / 2;
    if step < half {
        lr_init
    } else if step >= total {
        0.0
    } else {
        lr_init * (total - step) as f64 / (total - half) as f64
    }
}
