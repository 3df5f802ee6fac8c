//! Knowledge distillation: the student is trained on a mix of cross-entropy
//! and the KL divergence to the teacher's temperature-softened outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{ModelError, ModelState};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use crate::train::{train_with, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("non-finite loss term")]
    NonFinite,
    #[error("teacher and student configs differ")]
    ConfigMismatch,
    #[error("student has no live layers")]
    NoLiveLayers,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let fine_tune = TrainConfig::default();
        DistillConfig {
            temperature: 2.0,
            alpha: 0.5,
            train: TrainConfig {
                epochs: 2 * fine_tune.epochs,
                ..fine_tune
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DistillError::Temperature(self.temperature));
        }
        check_alpha(self.alpha)?;
        self.train.validate()?;
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(DistillError::Alpha(alpha))
    }
}

/// Mean over the batch of `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kd_loss(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DistillError::Temperature(temperature));
    }
    let mut g = Graph::new();
    let t = g.input("teacher", teacher.clone());
    let s = g.input("student", student.clone());
    let kl = g.kl_div(t, s, temperature);
    g.forward()?;
    // Rounding can leave a KL of equal distributions a hair below zero.
    Ok(g.value(kl)?.item().max(0.0))
}

/// `alpha * ce + (1 - alpha) * kd`.
pub fn combined_loss(ce: f64, kd: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(ce.is_finite() && kd.is_finite()) {
        return Err(DistillError::NonFinite);
    }
    Ok(alpha * ce + (1.0 - alpha) * kd)
}

fn combined_node(g: &mut Graph, ce: NodeId, kd: NodeId, alpha: f64) -> NodeId {
    let a = g.scale(ce, alpha);
    let b = g.scale(kd, 1.0 - alpha);
    g.add(a, b)
}

/// Trains `student` against the frozen `teacher` with the shared mini-batch
/// loop, so `alpha = 1` reproduces plain fine-tuning step for step. No `T^2`
/// factor is applied to the distillation term.
pub fn distill_train(
    teacher: &ModelState,
    student: &mut ModelState,
    samples: &[Sample],
    config: &DistillConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if !teacher.config.same_family(&student.config) {
        return Err(DistillError::ConfigMismatch);
    }
    if student.live_layers().is_empty() {
        return Err(DistillError::NoLiveLayers);
    }
    let (temperature, alpha) = (config.temperature, config.alpha);
    let report = train_with(student, samples, &config.train, |m, batch| {
        let target = teacher.forward(batch, false)?.logits;
        m.objective_and_grads(batch, |g, logits, ce| {
            let t = g.input("teacher_logits", target);
            let kd = g.kl_div(t, logits, temperature);
            combined_node(g, ce, kd, alpha)
        })
    })?;
    Ok(report)
}
