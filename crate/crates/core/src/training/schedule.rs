use serde::{Deserialize, Serialize};

use crate::error::{Result, SvtError};
use crate::params::ParamStore;
use crate::text::DEFAULT_TEMPLATE;

/// Base-session optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the semantic loss; 0 trains the visual-only ablation.
    pub lambda: f64,
    pub lr_b: f64,
    pub momentum: f64,
    pub main_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Only the projection `f` of the text branch is updated.
    pub freeze_text_encoder: bool,
    pub prompt_template: String,
    /// Random horizontal flips (image inputs only).
    pub augment_flip: bool,
    /// Random crops after zero-padding by this many pixels (image inputs only).
    pub augment_crop_pad: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            lr_b: 0.01,
            momentum: 0.9,
            main_epochs: 50,
            finetune_epochs: 10,
            finetune_lr: 0.0002,
            decay_factor: 0.5,
            decay_every: 100,
            batch_size: 32,
            seed: 0,
            freeze_text_encoder: false,
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            augment_flip: false,
            augment_crop_pad: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 500 epochs at 0.01, then 100 at 0.0002,
    /// halving every 100 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            main_epochs: 500,
            finetune_epochs: 100,
            ..TrainConfig::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.main_epochs + self.finetune_epochs
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_b", self.lr_b),
            ("finetune_lr", self.finetune_lr),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SvtError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SvtError::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SvtError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.main_epochs == 0 {
            return Err(SvtError::Config(
                "batch_size, decay_every and main_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Step decay within each phase: the main phase starts at `lr_b`, the
/// fine-tune phase restarts at `finetune_lr`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let (base, offset) = if epoch < config.main_epochs {
        (config.lr_b, epoch)
    } else if epoch < config.total_epochs() {
        (config.finetune_lr, epoch - config.main_epochs)
    } else {
        return Err(SvtError::Schedule {
            epoch,
            total: config.total_epochs(),
        });
    };
    let steps = (offset / config.decay_every.max(1)) as i32;
    Ok(base * config.decay_factor.powi(steps))
}

/// `v ← momentum·v + g; p ← p − lr·v` for every tensor in `grads`.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    velocity: &mut ParamStore,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(SvtError::Numeric(format!("gradient of {name}")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(SvtError::Shape(format!(
                "gradient of {name} is {:?} but the tensor is {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    for (name, g) in grads.iter() {
        if !velocity.contains(name) {
            velocity.insert(name.clone(), crate::tensor::Matrix::zeros(g.rows(), g.cols()));
        }
        let v = velocity.get_mut(name)?;
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = momentum * *vi + gi;
        }
        let v = v.clone();
        let p = params.get_mut(name)?;
        for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    Ok(())
}
