//! Mini-batch Adam training shared by fine-tuning and distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{tokenize_batch, Sample, TokenBatch, MAX_LEN};
use crate::model::{ModelError, ModelState};
use crate::tensor::{AdamConfig, AdamState, Gradients, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training samples")]
    NoSamples,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr = {}", self.lr)));
        }
        Ok(())
    }
}

/// Loss of every optimizer step, in order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Runs `epochs` passes over `samples`, reshuffled each epoch from
/// `config.seed`, taking one Adam step per batch with the gradient returned
/// by `step`. Only live parameters are updated.
pub fn train_with<F>(
    model: &mut ModelState,
    samples: &[Sample],
    config: &TrainConfig,
    mut step: F,
) -> Result<TrainReport>
where
    F: FnMut(&ModelState, &TokenBatch) -> std::result::Result<(f64, Gradients), ModelError>,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let picked: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let batch = tokenize_batch(&picked, MAX_LEN);
            let (loss, grads) = step(model, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            let mut params = model.live_tensors_mut();
            adam.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
            report.losses.push(loss);
        }
    }
    Ok(report)
}

/// Cross-entropy fine-tuning.
pub fn fine_tune(model: &mut ModelState, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, samples, config, |m, batch| {
        let out = m.loss_and_grads(batch, false)?;
        Ok((out.loss, out.grads))
    })
}
