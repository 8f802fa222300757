use ndarray::{Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    backward, forward, init_weights, lr_schedule, mse_output_grad, predict, sgd_momentum_step, ForwardMode, ModelSpec,
    ModelWeights, SequenceBatch, TrainConfig,
};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng};

/// Feature tensors (`N × rows × steps`) with one regression target per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub features: Array3<f32>,
    pub targets: Vec<f32>,
}

impl SampleSet {
    pub fn new(features: Array3<f32>, targets: Vec<f32>) -> Result<Self> {
        if features.len_of(Axis(0)) != targets.len() {
            return Err(Error::LengthMismatch {
                left: features.len_of(Axis(0)),
                right: targets.len(),
            });
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sample(&self, i: usize) -> ArrayView2<'_, f32> {
        self.features.index_axis(Axis(0), i)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    fn batch(&self, idx: &[usize]) -> Result<(SequenceBatch<f32>, Vec<f32>)> {
        let views: Vec<_> = idx.iter().map(|&i| self.sample(i)).collect();
        Ok((SequenceBatch::from_views(&views)?, idx.iter().map(|&i| self.targets[i]).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean train-mode MSE over the epoch's mini-batches (dropout active).
    pub train_loss: f64,
    /// Eval-mode MSE on the validation set.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub history: Vec<EpochStats>,
}

/// Eval-mode predictions for every sample, in chunks of `chunk`.
pub fn predict_samples(weights: &ModelWeights<f32>, set: &SampleSet, chunk: usize) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for part in idx.chunks(chunk.max(1)) {
        let (b, _) = set.batch(part)?;
        out.extend(predict(weights, &b)?);
    }
    Ok(out)
}

fn mse(pred: &[f32], targets: &[f32]) -> f64 {
    pred.iter()
        .zip(targets)
        .map(|(&p, &t)| (f64::from(p) - f64::from(t)).powi(2))
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// Mini-batch SGD with momentum. Reproducible from `cfg.seed` and the data alone.
pub fn train(spec: &ModelSpec, cfg: &TrainConfig, train_set: &SampleSet, val: Option<&SampleSet>) -> Result<TrainOutcome> {
    train_with_progress(spec, cfg, train_set, val, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &SampleSet,
    val: Option<&SampleSet>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySelection("training set is empty".into()));
    }
    let mut weights = init_weights::<f32>(spec, derive_seed(cfg.seed, "init"))?;
    let mut velocity = weights.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, &format!("shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, targets) = train_set.batch(idx)?;
            let mode = ForwardMode::Train {
                seed: derive_seed(cfg.seed, &format!("dropout/{epoch}/{bi}")),
            };
            let cache = forward(&weights, &batch, mode)?;
            let (loss, d_out) = mse_output_grad(&cache.predictions, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss });
            }
            loss_sum += loss * idx.len() as f64;
            let grads = backward(&weights, &cache, &d_out)?;
            sgd_momentum_step(&mut weights, &grads, &mut velocity, lr, cfg.momentum)?;
        }
        if !weights.all_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                loss: f64::NAN,
            });
        }
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(mse(&predict_samples(&weights, v, 256)?, &v.targets)),
            _ => None,
        };
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { weights, history })
}
