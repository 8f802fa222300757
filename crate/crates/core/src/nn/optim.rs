use serde::{Deserialize, Serialize};

use super::{ModelWeights, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub momentum: f64,
    pub initial_lr: f64,
    pub epochs: usize,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    /// Explicit drop epochs. When set, replaces the periodic `lr_drop_every` schedule.
    pub lr_milestones: Option<Vec<usize>>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            initial_lr: 5e-4,
            epochs: 45,
            lr_drop_every: 15,
            lr_drop_factor: 0.1,
            lr_milestones: None,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 150 epochs with drops at epochs 50 and 100.
    pub fn long_schedule() -> Self {
        Self {
            epochs: 150,
            lr_milestones: Some(vec![50, 100]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {}", self.initial_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_drop_every == 0 {
            return Err(Error::InvalidParameter(
                "batch size, epochs and drop period must be >= 1".into(),
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!("drop factor must be in (0, 1], got {}", self.lr_drop_factor)));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let epoch = epoch.max(1);
    let drops = match &cfg.lr_milestones {
        Some(ms) => ms.iter().filter(|&&m| epoch > m).count(),
        None => (epoch - 1) / cfg.lr_drop_every.max(1),
    };
    cfg.initial_lr * cfg.lr_drop_factor.powi(drops as i32)
}

/// `v ← μ v + g`, `w ← w − lr v`, applied in place to every tensor.
pub fn sgd_momentum_step<F: Real>(
    weights: &mut ModelWeights<F>,
    gradients: &ModelWeights<F>,
    velocity: &mut ModelWeights<F>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if weights.spec != gradients.spec || weights.spec != velocity.spec {
        return Err(Error::SpecMismatch("optimizer buffers do not match the model".into()));
    }
    let (lr, mu) = (F::of_f64(lr), F::of_f64(momentum));
    let grads = gradients.named();
    for ((w, v), (_, _, g)) in weights.slices_mut().into_iter().zip(velocity.slices_mut()).zip(grads) {
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}
